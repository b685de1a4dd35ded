//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use femba::graph::{Graph, Var};
use femba::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Compares tape gradients of `build` against central finite differences
/// for every input. `build` receives the input vars and returns any-shaped
/// output, which is reduced to a scalar through fixed random weights.
/// Returns the worst relative error over all inputs.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    seed: u64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let mut probe_rng = rng(seed ^ 0x9e37_79b9);
    let scalarize = |g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>| -> Var {
        if g.value(out).numel() == 1 {
            return g.sum(out);
        }
        let w = g.constant(weights.clone());
        let wo = g.mul(out, w).unwrap();
        g.sum(wo)
    };
    let eval = |values: &[Tensor<f64>], weights: &Tensor<f64>| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = scalarize(&mut g, out, weights);
        g.value(loss).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let weights = random_tensor(&mut probe_rng, g.shape(out), 1.0);
    let loss = scalarize(&mut g, out, &weights);
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = Vec::with_capacity(inputs[k].numel());
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_EPS;
            numeric.push((eval(&plus, &weights) - eval(&minus, &weights)) / (2.0 * FD_EPS));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Finite-difference checks for every differentiable op and the SSM layers.
/// Each entry is `(name, worst relative error)`.
pub fn op_gradient_cases() -> Vec<(&'static str, f64)> {
    use femba::params::ParamStore;
    use femba::ssm::{self, BiMambaBlock, SsmDims, SsmParams};

    let mut r = rng(11);
    let mut out = Vec::new();
    let m = |r: &mut ChaCha8Rng, s: &[usize]| random_tensor(r, s, 1.0);

    out.push(("matmul", grad_check(&[m(&mut r, &[3, 4]), m(&mut r, &[4, 2])], 1, |g, v| g.matmul(v[0], v[1]).unwrap())));
    out.push(("add", grad_check(&[m(&mut r, &[3, 2]), m(&mut r, &[3, 2])], 2, |g, v| g.add(v[0], v[1]).unwrap())));
    out.push(("sub", grad_check(&[m(&mut r, &[3, 2]), m(&mut r, &[3, 2])], 3, |g, v| g.sub(v[0], v[1]).unwrap())));
    out.push(("mul", grad_check(&[m(&mut r, &[3, 2]), m(&mut r, &[3, 2])], 4, |g, v| g.mul(v[0], v[1]).unwrap())));
    out.push(("add_row", grad_check(&[m(&mut r, &[3, 4]), m(&mut r, &[4])], 5, |g, v| g.add_row(v[0], v[1]).unwrap())));
    out.push(("mul_row", grad_check(&[m(&mut r, &[3, 4]), m(&mut r, &[4])], 6, |g, v| g.mul_row(v[0], v[1]).unwrap())));
    out.push(("scale", grad_check(&[m(&mut r, &[5])], 7, |g, v| g.scale(v[0], -1.7))));
    out.push(("exp", grad_check(&[m(&mut r, &[5])], 8, |g, v| g.exp(v[0]))));
    out.push(("softplus", grad_check(&[random_tensor(&mut r, &[6], 4.0)], 9, |g, v| g.softplus(v[0]))));
    out.push(("sigmoid", grad_check(&[random_tensor(&mut r, &[6], 4.0)], 10, |g, v| g.sigmoid(v[0]))));
    out.push(("silu", grad_check(&[random_tensor(&mut r, &[6], 4.0)], 11, |g, v| g.silu(v[0]))));
    out.push(("gelu", grad_check(&[random_tensor(&mut r, &[6], 3.0)], 12, |g, v| g.gelu(v[0]))));
    out.push((
        "conv2d_patch",
        grad_check(&[m(&mut r, &[4, 6]), m(&mut r, &[3, 2, 3]), m(&mut r, &[3])], 13, |g, v| {
            g.conv2d_patch(v[0], v[1], v[2]).unwrap()
        }),
    ));
    out.push((
        "depthwise_conv1d_causal",
        grad_check(&[m(&mut r, &[6, 3]), m(&mut r, &[3, 4]), m(&mut r, &[3])], 14, |g, v| {
            g.depthwise_conv1d_causal(v[0], v[1], v[2]).unwrap()
        }),
    ));
    out.push((
        "conv1d_same",
        grad_check(&[m(&mut r, &[5, 3]), m(&mut r, &[2, 3, 3]), m(&mut r, &[2])], 15, |g, v| {
            g.conv1d_same(v[0], v[1], v[2]).unwrap()
        }),
    ));
    out.push(("rms_norm", grad_check(&[m(&mut r, &[3, 5]), m(&mut r, &[5])], 16, |g, v| g.rms_norm(v[0], v[1], 1e-5).unwrap())));
    out.push(("reverse", grad_check(&[m(&mut r, &[4, 3])], 17, |g, v| g.reverse(v[0], 0).unwrap())));
    out.push(("permute", grad_check(&[m(&mut r, &[2, 3, 4])], 18, |g, v| g.permute(v[0], &[2, 0, 1]).unwrap())));
    out.push(("reshape", grad_check(&[m(&mut r, &[2, 6])], 19, |g, v| g.reshape(v[0], &[3, 4]).unwrap())));
    out.push(("slice_cols", grad_check(&[m(&mut r, &[3, 6])], 20, |g, v| g.slice_cols(v[0], 2, 3).unwrap())));
    out.push(("gather_rows", grad_check(&[m(&mut r, &[5, 2])], 21, |g, v| g.gather_rows(v[0], &[4, 1, 1]).unwrap())));
    out.push(("zero_rows", grad_check(&[m(&mut r, &[5, 2])], 22, |g, v| g.zero_rows(v[0], &[0, 3]).unwrap())));
    out.push(("sum", grad_check(&[m(&mut r, &[2, 3])], 23, |g, v| g.sum(v[0]))));
    out.push(("mean", grad_check(&[m(&mut r, &[2, 3])], 24, |g, v| g.mean(v[0]))));
    out.push(("sum_axis", grad_check(&[m(&mut r, &[2, 3, 2])], 25, |g, v| g.sum_axis(v[0], 1).unwrap())));
    out.push(("mean_axis", grad_check(&[m(&mut r, &[4, 3])], 26, |g, v| g.mean_axis(v[0], 0).unwrap())));
    let target = random_tensor(&mut r, &[8], 2.0);
    out.push(("smooth_l1", grad_check(&[random_tensor(&mut r, &[8], 2.0)], 27, |g, v| g.smooth_l1(v[0], &target, 1.0).unwrap())));
    out.push((
        "softmax_cross_entropy",
        grad_check(&[m(&mut r, &[3, 4])], 28, |g, v| g.softmax_cross_entropy(v[0], &[1, 3, 0]).unwrap()),
    ));
    let bce_t = Tensor::from_f64(vec![2, 3], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    out.push(("bce_with_logits", grad_check(&[random_tensor(&mut r, &[2, 3], 3.0)], 29, |g, v| g.bce_with_logits(v[0], &bce_t).unwrap())));
    out.push(("softmax", grad_check(&[m(&mut r, &[2, 4])], 30, |g, v| g.softmax(v[0]).unwrap())));

    // scan core with a < 0 and δ > 0
    let (l, di, n) = (5, 3, 2);
    let a_log = random_tensor(&mut r, &[di, n], 0.5);
    let pre = random_tensor(&mut r, &[l, di], 1.0);
    out.push((
        "selective_scan_core",
        grad_check(
            &[m(&mut r, &[l, di]), pre, a_log, m(&mut r, &[l, n]), m(&mut r, &[l, n]), m(&mut r, &[di])],
            31,
            |g, v| {
                let delta = g.softplus(v[1]);
                let a = g.exp(v[2]);
                let a = g.neg(a);
                ssm::scan_op(g, v[0], delta, a, v[3], v[4], v[5]).unwrap()
            },
        ),
    ));

    // full blocks: gradients with respect to the input and every parameter
    let dims = SsmDims::standard(4, 3, 2);
    let mut store = ParamStore::<f64>::new();
    let mut init_rng = rng(99);
    let params = SsmParams::new(&mut store, "m", dims, &mut init_rng);
    let mut values = vec![m(&mut r, &[6, 4])];
    values.extend(random_params(&store, &mut r));
    out.push((
        "mamba_block",
        grad_check(&values, 32, |g, v| mamba_via_vars(g, &store, &params, v)),
    ));

    let mut bstore = ParamStore::<f64>::new();
    let block = BiMambaBlock::new(&mut bstore, "b", dims, &mut init_rng);
    let mut values = vec![m(&mut r, &[5, 4])];
    values.extend(random_params(&bstore, &mut r));
    out.push((
        "bimamba_block",
        grad_check(&values, 33, |g, v| bimamba_via_vars(g, &bstore, &block, v)),
    ));
    out
}

/// Uniform random values shaped like every parameter of `store`. The B, C
/// and δ projections get a wider range so the scan path, and with it the δ and A
/// gradients, is not swamped by the skip and residual paths. Norm gains stay
/// near one so they do not shrink the signal.
pub fn random_params(store: &femba::ParamStore<f64>, r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    store
        .iter()
        .map(|(_, p)| {
            if p.name.ends_with("norm") {
                let mut t = random_tensor(r, p.value.shape(), 0.25);
                t.data_mut().iter_mut().for_each(|v| *v += 1.0);
                return t;
            }
            let wide = ["w_b", "w_c", "w_delta_down", "w_delta_up"].iter().any(|s| p.name.ends_with(s));
            let scale = if wide { 2.0 } else { 0.5 };
            random_tensor(r, p.value.shape(), scale)
        })
        .collect()
}

/// Re-creates the block using the provided vars as parameter leaves so the
/// finite-difference probe perturbs them.
fn mamba_via_vars(
    g: &mut Graph<f64>,
    store: &femba::ParamStore<f64>,
    params: &femba::ssm::SsmParams,
    vars: &[Var],
) -> Var {
    bind_params(g, store, vars);
    femba::ssm::mamba_block(g, store, params, vars[0]).unwrap()
}

fn bimamba_via_vars(
    g: &mut Graph<f64>,
    store: &femba::ParamStore<f64>,
    block: &femba::ssm::BiMambaBlock,
    vars: &[Var],
) -> Var {
    bind_params(g, store, vars);
    femba::ssm::bimamba_block(g, store, block, vars[0]).unwrap()
}

/// `vars[1..]` are the store's parameters in id order.
pub fn bind_params(g: &mut Graph<f64>, store: &femba::ParamStore<f64>, vars: &[Var]) {
    for (k, id) in store.ids().enumerate() {
        g.bind_param(id, vars[k + 1]);
    }
}

/// Gradient check of tokenize → mask → encode → decode → masked loss with
/// respect to every parameter, on a two-token 64-bit instance.
pub fn end_to_end_gradient() -> f64 {
    use femba::model::{extract_patches, sample_mask, Femba, ModelConfig, Parts};
    use femba::params::ParamStore;

    let cfg = ModelConfig::custom(1, 4, 3).with_input(4, 64);
    assert_eq!(cfg.num_tokens(), 2);
    let mut store = ParamStore::<f64>::new();
    let model = Femba::new(&cfg, Parts::PRETRAIN, &mut store, &mut rng(5)).unwrap();
    let mut r = rng(6);
    let x = random_tensor(&mut r, &[4, 64], 0.5);
    let target = extract_patches(&x, &cfg).unwrap();
    let mask = sample_mask(cfg.num_tokens(), cfg.mask_ratio, 3).unwrap();
    assert_eq!(mask.len(), 1);
    let values = random_params(&store, &mut r);
    grad_check(&values, 34, |g, v| {
        for (k, id) in store.ids().enumerate() {
            g.bind_param(id, v[k]);
        }
        let pred = model.reconstruct(g, &store, &x, &mask).unwrap();
        femba::train::masked_loss(g, pred, &target, &mask, 1.0).unwrap()
    })
}

/// Straight-line selective scan over plain `f64` arrays, one token at a
/// time, with the projections, softplus and exact ZOH written out.
#[allow(clippy::too_many_arguments)]
pub fn naive_selective_scan(
    u: &[f64],
    l: usize,
    di: usize,
    n: usize,
    r: usize,
    w_down: &[f64],
    w_up: &[f64],
    bias: &[f64],
    w_b: &[f64],
    w_c: &[f64],
    a_log: &[f64],
    d_skip: &[f64],
) -> Vec<f64> {
    let mut h = vec![vec![0.0; n]; di];
    let mut y = vec![0.0; l * di];
    for t in 0..l {
        let ut = &u[t * di..(t + 1) * di];
        let low: Vec<f64> = (0..r).map(|k| (0..di).map(|i| ut[i] * w_down[i * r + k]).sum()).collect();
        let bt: Vec<f64> = (0..n).map(|j| (0..di).map(|i| ut[i] * w_b[i * n + j]).sum()).collect();
        let ct: Vec<f64> = (0..n).map(|j| (0..di).map(|i| ut[i] * w_c[i * n + j]).sum()).collect();
        for i in 0..di {
            let pre: f64 = (0..r).map(|k| low[k] * w_up[k * di + i]).sum::<f64>() + bias[i];
            let delta = (1.0 + pre.exp()).ln();
            let mut acc = 0.0;
            for j in 0..n {
                let a = -a_log[i * n + j].exp();
                let a_d = (delta * a).exp();
                let b_d = (a_d - 1.0) / a * bt[j];
                h[i][j] = a_d * h[i][j] + b_d * ut[i];
                acc += ct[j] * h[i][j];
            }
            y[t * di + i] = acc + d_skip[i] * ut[i];
        }
    }
    y
}

/// `P(pos > neg) + 0.5·P(pos = neg)` over all pairs.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Step-interpolated PR area by recounting the confusion at every distinct
/// threshold, highest first.
pub fn aupr_thresholds(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut area, mut prev) = (0.0, 0.0);
    for th in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= th && l).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= th && !l).count() as f64;
        let recall = tp / pos as f64;
        area += (recall - prev) * tp / (tp + fp);
        prev = recall;
    }
    Some(area)
}

/// Mean recall over present classes from a confusion matrix.
pub fn balanced_accuracy_confusion(preds: &[usize], labels: &[usize], k: usize) -> f64 {
    let mut m = vec![vec![0usize; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    let recalls: Vec<f64> = (0..k)
        .filter(|&c| m[c].iter().sum::<usize>() > 0)
        .map(|c| m[c][c] as f64 / m[c].iter().sum::<usize>() as f64)
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// Geometry of the desk-scale training checks: 4 channels × 256 samples at
/// 200 Hz, 4 × 32 patches (8 tokens).
pub const TRAIN_C: usize = 4;
pub const TRAIN_T: usize = 256;

/// Eight consecutive, normalized windows of one clean synthetic recording.
pub fn overfit_windows() -> Vec<Tensor<f32>> {
    use femba::data::{labeled_windows, synth_generate, SynthSpec};
    let spec = SynthSpec {
        channels: TRAIN_C,
        duration_s: (8 * TRAIN_T) as f64 / 200.0,
        seed: 1,
        artifact_rate: 0.0,
        noise_level: 0.05,
        ..SynthSpec::default()
    };
    let (rec, _) = synth_generate(&spec).unwrap();
    let w = labeled_windows(&rec, &[], TRAIN_T, TRAIN_T, 4, None).unwrap();
    assert_eq!(w.len(), 8);
    w.into_iter().map(|w| w.data).collect()
}

/// `n` independent windows labeled under BC. Odd windows carry one
/// 10σ plateau on every channel lasting 64–96 samples at an interior
/// offset; even windows are clean.
pub fn separable_binary_set(n: usize) -> Vec<(Tensor<f32>, femba::data::Label)> {
    use femba::data::labels::Annotation;
    use femba::data::{labeled_windows, synth_generate, Scheme, SynthSpec};
    let (c, t) = (TRAIN_C, TRAIN_T);
    let mut r = rng(3);
    (0..n as u64)
        .map(|i| {
            let spec = SynthSpec {
                channels: c,
                duration_s: t as f64 / 200.0,
                artifact_rate: 0.0,
                seed: 1000 + i,
                ..SynthSpec::default()
            };
            let (mut rec, _) = synth_generate(&spec).unwrap();
            let mut anns = Vec::new();
            if i % 2 == 1 {
                let len = r.random_range(t / 4..=3 * t / 8);
                let start = r.random_range(t / 8..t - len - t / 8);
                for ch in 0..c {
                    let row = rec.samples.row(ch).to_vec();
                    let mean = row.iter().sum::<f32>() / t as f32;
                    let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / t as f32).sqrt();
                    for v in &mut rec.samples.data_mut()[ch * t + start..ch * t + start + len] {
                        *v += 10.0 * sd;
                    }
                    anns.push(Annotation {
                        channel: ch,
                        start,
                        end: start + len,
                        type_id: 0,
                    });
                }
            }
            let w = labeled_windows(&rec, &anns, t, t, 4, Some(Scheme::Bc)).unwrap().remove(0);
            (w.data, w.label.unwrap())
        })
        .collect()
}

/// Runs the graph scan and the naive reference on one random instance and
/// returns the worst absolute difference.
pub fn scan_vs_naive(seed: u64, l: usize, di: usize, n: usize) -> f64 {
    let mut r = rng(seed);
    let dims = femba::ssm::SsmDims {
        d_model: di,
        d_inner: di,
        state: n,
        dt_rank: 1 + di / 4,
        conv_width: 4,
    };
    let mut store = femba::ParamStore::<f64>::new();
    let p = femba::ssm::SsmParams::new(&mut store, "s", dims, &mut r);
    // widen δ and B/C so the state carries real signal
    let ids = [p.w_delta_down, p.w_delta_up, p.delta_bias, p.w_b, p.w_c, p.a_log];
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = random_tensor(&mut r, &shape, 1.0);
    }
    let u = random_tensor(&mut r, &[l, di], 1.0);
    let mut g = Graph::inference();
    let uv = g.constant(u.clone());
    let y = femba::ssm::selective_scan(&mut g, &store, &p, uv, femba::ssm::Direction::Forward).unwrap();
    let got = g.value(y).to_f64_vec();
    let v = |id| store.value(id).to_f64_vec();
    let want = naive_selective_scan(
        &u.to_f64_vec(),
        l,
        di,
        n,
        dims.dt_rank,
        &v(p.w_delta_down),
        &v(p.w_delta_up),
        &v(p.delta_bias),
        &v(p.w_b),
        &v(p.w_c),
        &v(p.a_log),
        &v(p.d_skip),
    );
    got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
