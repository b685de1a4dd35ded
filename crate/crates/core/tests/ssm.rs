//! Selective scan and Mamba blocks against straight-line references.

mod common;

use common::{naive_selective_scan, random_tensor, rng};
use femba::graph::Graph;
use femba::ssm::{self, BiMambaBlock, Direction, SsmDims, SsmParams};
use femba::{ParamStore, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn scan_matches_naive_recurrence() {
    let mut r = rng(1);
    for k in 0..100 {
        let (l, di, n) = (r.random_range(1..=64), r.random_range(1..=8), r.random_range(1..=8));
        let err = common::scan_vs_naive(1000 + k, l, di, n);
        assert!(err <= 1e-6, "instance {k} (L={l}, di={di}, n={n}): {err}");
    }
}

#[test]
fn backward_direction_is_reversed_forward() {
    let mut r = rng(2);
    let dims = SsmDims::standard(4, 3, 2);
    let mut store = ParamStore::<f64>::new();
    let p = SsmParams::new(&mut store, "s", dims, &mut r);
    let u = random_tensor(&mut r, &[9, dims.d_inner], 1.0);
    let mut g = Graph::inference();
    let uv = g.constant(u);
    let bwd = ssm::selective_scan(&mut g, &store, &p, uv, Direction::Backward).unwrap();
    let ur = g.reverse(uv, 0).unwrap();
    let fwd = ssm::selective_scan(&mut g, &store, &p, ur, Direction::Forward).unwrap();
    let fwd = g.reverse(fwd, 0).unwrap();
    assert_eq!(g.value(bwd).data(), g.value(fwd).data());
}

#[test]
fn swapping_branches_and_reversing_input_reverses_output() {
    let mut r = rng(3);
    let dims = SsmDims::standard(6, 4, 2);
    let mut store = ParamStore::<f64>::new();
    let block = BiMambaBlock::new(&mut store, "b", dims, &mut r);
    let swapped = BiMambaBlock {
        forward: block.backward.clone(),
        backward: block.forward.clone(),
        norm: block.norm,
    };
    let x = random_tensor(&mut r, &[11, 6], 1.0);
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let y = ssm::bimamba_block(&mut g, &store, &block, xv).unwrap();
    let xr = g.reverse(xv, 0).unwrap();
    let ys = ssm::bimamba_block(&mut g, &store, &swapped, xr).unwrap();
    let ysr = g.reverse(ys, 0).unwrap();
    let err = g
        .value(y)
        .data()
        .iter()
        .zip(g.value(ysr).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn long_scan_stays_bounded() {
    let mut r = rng(4);
    let (l, di, n) = (10_000, 4, 8);
    let normal = |r: &mut rand_chacha::ChaCha8Rng, k: usize| -> Vec<f64> { (0..k).map(|_| r.sample(StandardNormal)).collect() };
    let u = normal(&mut r, l * di);
    let delta: Vec<f64> = (0..l * di).map(|_| r.random_range(1e-3..1.0)).collect();
    let a: Vec<f64> = (0..di * n).map(|k| -((k % n + 1) as f64)).collect();
    let b = normal(&mut r, l * n);
    let c = normal(&mut r, l * n);
    let d = vec![1.0; di];
    let out = ssm::scan_kernel(&u, &delta, &a, &b, &c, &d, l, di, n, true);
    assert!(out.y.iter().all(|v| v.is_finite()));
    // |h| ≤ max|b·u|·max(b_d/|b|) / (1 − max a_d)
    let bu = u.iter().fold(0.0f64, |m, v| m.max(v.abs())) * b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (a_max, f_max) = delta.iter().fold((0.0f64, 0.0f64), |acc, &dt| {
        let (e, f) = ssm::zoh_discretize(-1.0, dt, 1.0);
        assert!(e > 0.0 && e < 1.0);
        (acc.0.max(e), acc.1.max(f))
    });
    let bound = bu * f_max / (1.0 - a_max);
    let h_max = out.states.unwrap().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(h_max <= bound, "{h_max} > {bound}");
}

/// `(y ⊙ silu(z))·W_out` with `(u, z) = split(x·W_in)` and
/// `u ← silu(causal_conv(u))`, written out on plain arrays.
fn naive_mamba(x: &[f64], l: usize, store: &ParamStore<f64>, p: &SsmParams) -> Vec<f64> {
    let SsmDims {
        d_model: d,
        d_inner: di,
        state: n,
        dt_rank: r,
        conv_width: k,
    } = p.dims;
    let v = |id| store.value(id).to_f64_vec();
    let silu = |a: f64| a / (1.0 + (-a).exp());
    let w_in = v(p.w_in);
    let xz: Vec<f64> = (0..l * 2 * di)
        .map(|idx| {
            let (t, j) = (idx / (2 * di), idx % (2 * di));
            (0..d).map(|m| x[t * d + m] * w_in[m * 2 * di + j]).sum()
        })
        .collect();
    let (cw, cb) = (v(p.conv_w), v(p.conv_b));
    let mut u = vec![0.0; l * di];
    for t in 0..l {
        for c in 0..di {
            let mut acc = cb[c];
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src >= 0 {
                    acc += cw[c * k + j] * xz[src as usize * 2 * di + c];
                }
            }
            u[t * di + c] = silu(acc);
        }
    }
    let y = naive_selective_scan(
        &u,
        l,
        di,
        n,
        r,
        &v(p.w_delta_down),
        &v(p.w_delta_up),
        &v(p.delta_bias),
        &v(p.w_b),
        &v(p.w_c),
        &v(p.a_log),
        &v(p.d_skip),
    );
    let w_out = v(p.w_out);
    (0..l * d)
        .map(|idx| {
            let (t, m) = (idx / d, idx % d);
            (0..di)
                .map(|c| y[t * di + c] * silu(xz[t * 2 * di + di + c]) * w_out[c * d + m])
                .sum()
        })
        .collect()
}

#[test]
fn mamba_block_matches_composition() {
    let mut r = rng(5);
    let dims = SsmDims::standard(5, 3, 2);
    let mut store = ParamStore::<f64>::new();
    let p = SsmParams::new(&mut store, "m", dims, &mut r);
    let (w_b, w_c) = (p.w_b, p.w_c);
    for id in [w_b, w_c] {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = random_tensor(&mut r, &shape, 1.5);
    }
    let l = 13;
    let x = random_tensor(&mut r, &[l, 5], 1.0);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = ssm::mamba_block(&mut g, &store, &p, xv).unwrap();
    let want = naive_mamba(&x.to_f64_vec(), l, &store, &p);
    let err = g.value(y).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn scan_flops_double_with_length() {
    let (di, n) = (8, 4);
    let dims = SsmDims {
        d_model: di,
        d_inner: di,
        state: n,
        dt_rank: 1,
        conv_width: 4,
    };
    let mut store = ParamStore::<f32>::new();
    let p = SsmParams::new(&mut store, "s", dims, &mut rng(6));
    let flops = |l: usize| {
        let mut g = Graph::inference();
        let u = g.constant(Tensor::<f32>::ones(vec![l, di]));
        ssm::selective_scan(&mut g, &store, &p, u, Direction::Forward).unwrap();
        g.cost().flops() as f64
    };
    let ratio = flops(2048) / flops(1024);
    assert!((ratio - 2.0).abs() <= 0.1, "{ratio}");
}
