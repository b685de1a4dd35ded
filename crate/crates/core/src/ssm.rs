//! Selective state-space layers: ZOH discretization, the selective scan,
//! the Mamba block and the bidirectional block built from two of them.
//!
//! Per channel `i` and state `j`, with input-dependent step `δ_t,i`:
//!
//! ```text
//! a_d = exp(δ·a)            b_d = (exp(δ·a) − 1)/a · B_t,j
//! h_t = a_d ⊙ h_{t−1} + b_d · u_t,i        (h_0 = 0)
//! y_t,i = Σ_j C_t,j · h_t,i,j + D_i · u_t,i
//! ```
//!
//! The scan is strictly sequential along time and costs O(L·d_inner·n).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{CustomBackward, Graph, Var};
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

pub const RMS_EPS: f64 = 1e-5;

/// Below this `|δ·a|` the ZOH input factor uses its series expansion.
const SERIES_CUTOFF: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Zero-order-hold discretization for one (channel, state) pair.
///
/// Returns `(a_d, b_d)`. When `a == 0` the input factor takes its limit
/// `b_d = δ·b`.
pub fn zoh_discretize<T: Scalar>(a: T, delta: T, b: T) -> (T, T) {
    let (e, f) = zoh_factors(a, delta);
    (e, f * b)
}

/// `(exp(δa), expm1(δa)/a)`.
#[inline]
fn zoh_factors<T: Scalar>(a: T, delta: T) -> (T, T) {
    let x = delta * a;
    let e = x.exp();
    let f = if x.abs().as_f64() < SERIES_CUTOFF {
        delta * (T::one() + x * T::lit(0.5))
    } else {
        x.exp_m1() / a
    };
    (e, f)
}

/// `∂/∂a [expm1(δa)/a]`.
#[inline]
fn zoh_factor_da<T: Scalar>(a: T, delta: T, e: T, f: T) -> T {
    let x = delta * a;
    if x.abs().as_f64() < SERIES_CUTOFF {
        delta * delta * (T::lit(0.5) + x / T::lit(3.0))
    } else {
        (delta * e - f) / a
    }
}

/// Sizes of one selective-SSM branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsmDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub state: usize,
    pub dt_rank: usize,
    pub conv_width: usize,
}

impl SsmDims {
    /// Expansion `expand`, rank `ceil(d/16)`, width-4 convolution.
    pub fn standard(d_model: usize, state: usize, expand: usize) -> Self {
        Self {
            d_model,
            d_inner: expand * d_model,
            state,
            dt_rank: d_model.div_ceil(16),
            conv_width: 4,
        }
    }

    /// Learnable scalars in one branch.
    pub fn param_count(&self) -> usize {
        let (d, di, n, r, k) = (self.d_model, self.d_inner, self.state, self.dt_rank, self.conv_width);
        d * 2 * di          // w_in
            + di * k + di   // conv
            + di * r        // w_delta_down
            + r * di + di   // w_delta_up + bias
            + 2 * di * n    // w_b, w_c
            + di * n        // a_log
            + di            // d_skip
            + di * d // w_out
    }
}

/// Handles to the parameters of one selective-SSM branch.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub dims: SsmDims,
    pub w_in: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub w_delta_down: ParamId,
    pub w_delta_up: ParamId,
    pub delta_bias: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub w_out: ParamId,
}

/// Inverse of softplus.
fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, dims: SsmDims, rng: &mut R) -> Self {
        let SsmDims {
            d_model: d,
            d_inner: di,
            state: n,
            dt_rank: r,
            conv_width: k,
        } = dims;
        let name = |s: &str| format!("{prefix}.{s}");
        let w_in = store.add(name("w_in"), init::fan_in(rng, &[d, 2 * di], d));
        let conv_w = store.add(name("conv_w"), init::fan_in(rng, &[di, k], k));
        let conv_b = store.add(name("conv_b"), init::fan_in(rng, &[di], k));
        let w_delta_down = store.add(name("w_delta_down"), init::fan_in(rng, &[di, r], di));
        let w_delta_up = store.add(name("w_delta_up"), init::fan_in(rng, &[r, di], r));
        // softplus(bias) log-uniform in [1e-3, 1e-1]
        let bias: Vec<f64> = (0..di)
            .map(|_| {
                let u: f64 = rng.random();
                let dt = (1e-3f64.ln() + u * (1e-1f64.ln() - 1e-3f64.ln())).exp();
                inv_softplus(dt)
            })
            .collect();
        let delta_bias = store.add(name("delta_bias"), Tensor::from_f64(vec![di], &bias).expect("shape"));
        let w_b = store.add(name("w_b"), init::fan_in(rng, &[di, n], di));
        let w_c = store.add(name("w_c"), init::fan_in(rng, &[di, n], di));
        let a_log: Vec<f64> = (0..di * n).map(|idx| ((idx % n + 1) as f64).ln()).collect();
        let a_log = store.add(name("a_log"), Tensor::from_f64(vec![di, n], &a_log).expect("shape"));
        let d_skip = store.add(name("d_skip"), Tensor::ones(vec![di]));
        let w_out = store.add(name("w_out"), init::fan_in(rng, &[di, d], di));
        Self {
            dims,
            w_in,
            conv_w,
            conv_b,
            w_delta_down,
            w_delta_up,
            delta_bias,
            w_b,
            w_c,
            a_log,
            d_skip,
            w_out,
        }
    }

    pub fn ids(&self) -> [ParamId; 11] {
        [
            self.w_in,
            self.conv_w,
            self.conv_b,
            self.w_delta_down,
            self.w_delta_up,
            self.delta_bias,
            self.w_b,
            self.w_c,
            self.a_log,
            self.d_skip,
            self.w_out,
        ]
    }
}

/// Raw scan output plus the hidden-state trajectory when requested.
pub struct ScanOutput<T> {
    pub y: Vec<T>,
    pub states: Option<Vec<T>>,
}

/// Scan on plain slices. `u`, `delta`: `(L × di)`; `a`: `(di × n)`;
/// `b`, `c`: `(L × n)`; `d`: `(di)`.
#[allow(clippy::too_many_arguments)]
pub fn scan_kernel<T: Scalar>(
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    l: usize,
    di: usize,
    n: usize,
    keep_states: bool,
) -> ScanOutput<T> {
    let mut h = vec![T::zero(); di * n];
    let mut y = vec![T::zero(); l * di];
    let mut states = keep_states.then(|| Vec::with_capacity(l * di * n));
    for t in 0..l {
        let bt = &b[t * n..(t + 1) * n];
        let ct = &c[t * n..(t + 1) * n];
        for i in 0..di {
            let ut = u[t * di + i];
            let dt = delta[t * di + i];
            let ai = &a[i * n..(i + 1) * n];
            let hi = &mut h[i * n..(i + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                let (e, f) = zoh_factors(ai[j], dt);
                hi[j] = e * hi[j] + f * bt[j] * ut;
                acc = acc + ct[j] * hi[j];
            }
            y[t * di + i] = acc + d[i] * ut;
        }
        if let Some(s) = states.as_mut() {
            s.extend_from_slice(&h);
        }
    }
    ScanOutput { y, states }
}

struct ScanBackward<T> {
    dims: (usize, usize, usize),
    states: Vec<T>,
}

impl<T: Scalar> CustomBackward<T> for ScanBackward<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (l, di, n) = self.dims;
        let (u, delta, a, b, c, d) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
            inputs[5].data(),
        );
        let h = &self.states;
        let mut gu = vec![T::zero(); l * di];
        let mut gdelta = vec![T::zero(); l * di];
        let mut ga = vec![T::zero(); di * n];
        let mut gb = vec![T::zero(); l * n];
        let mut gc = vec![T::zero(); l * n];
        let mut gd = vec![T::zero(); di];
        let mut carry = vec![T::zero(); di * n];
        for t in (0..l).rev() {
            for i in 0..di {
                let gy = grad[t * di + i];
                let ut = u[t * di + i];
                let dt = delta[t * di + i];
                gd[i] = gd[i] + gy * ut;
                let mut gut = gy * d[i];
                let mut gdt = T::zero();
                for j in 0..n {
                    let hij = h[(t * di + i) * n + j];
                    let h_prev = if t > 0 { h[((t - 1) * di + i) * n + j] } else { T::zero() };
                    let gh = carry[i * n + j] + gy * c[t * n + j];
                    gc[t * n + j] = gc[t * n + j] + gy * hij;
                    let aij = a[i * n + j];
                    let (e, f) = zoh_factors(aij, dt);
                    let bj = b[t * n + j];
                    let ge = gh * h_prev;
                    let gf = gh * bj * ut;
                    gb[t * n + j] = gb[t * n + j] + gh * f * ut;
                    gut = gut + gh * f * bj;
                    gdt = gdt + ge * aij * e + gf * e;
                    ga[i * n + j] = ga[i * n + j] + ge * dt * e + gf * zoh_factor_da(aij, dt, e, f);
                    carry[i * n + j] = gh * e;
                }
                gu[t * di + i] = gut;
                gdelta[t * di + i] = gdt;
            }
        }
        vec![Some(gu), Some(gdelta), Some(ga), Some(gb), Some(gc), Some(gd)]
    }
}

/// Records the scan core on `g`. Shapes as in [`scan_kernel`].
pub fn scan_op<T: Scalar>(g: &mut Graph<T>, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
    let (l, di) = g.value(u).dims2("selective_scan")?;
    let (di2, n) = g.value(a).dims2("selective_scan")?;
    let expect = |g: &Graph<T>, v: Var, shape: Vec<usize>| -> Result<()> {
        if g.shape(v) != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "selective_scan",
                expected: shape,
                actual: g.shape(v).to_vec(),
            });
        }
        Ok(())
    };
    if di2 != di {
        return Err(TensorError::ShapeMismatch {
            op: "selective_scan",
            expected: vec![di, n],
            actual: vec![di2, n],
        });
    }
    expect(g, delta, vec![l, di])?;
    expect(g, b, vec![l, n])?;
    expect(g, c, vec![l, n])?;
    expect(g, d, vec![di])?;
    if l == 0 {
        return Err(TensorError::Invalid {
            op: "selective_scan",
            detail: "empty sequence".into(),
        });
    }
    let inputs = [u, delta, a, b, c, d];
    let keep = g.any_tracked(&inputs);
    let out = scan_kernel(
        g.value(u).data(),
        g.value(delta).data(),
        g.value(a).data(),
        g.value(b).data(),
        g.value(c).data(),
        g.value(d).data(),
        l,
        di,
        n,
        keep,
    );
    g.add_cost((3 * l * di * n + l * di) as u64, (2 * l * di * n) as u64);
    let value = Tensor::new(vec![l, di], out.y)?;
    let rule = Box::new(ScanBackward {
        dims: (l, di, n),
        states: out.states.unwrap_or_default(),
    });
    Ok(g.custom(inputs.to_vec(), value, rule))
}

/// Input-dependent selective scan over `u` `(L × d_inner)`.
///
/// Computes `δ = softplus(u·W_down·W_up + bias)`, `B = u·W_b`, `C = u·W_c`,
/// `A = −exp(a_log)` and runs the scan. `Direction::Backward` reverses the
/// sequence before and after.
pub fn selective_scan<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &SsmParams,
    u: Var,
    direction: Direction,
) -> Result<Var> {
    let u = match direction {
        Direction::Forward => u,
        Direction::Backward => g.reverse(u, 0)?,
    };
    let w_down = g.param(store, p.w_delta_down);
    let w_up = g.param(store, p.w_delta_up);
    let bias = g.param(store, p.delta_bias);
    let low = g.matmul(u, w_down)?;
    let pre = g.matmul(low, w_up)?;
    let pre = g.add_row(pre, bias)?;
    let delta = g.softplus(pre);
    let w_b = g.param(store, p.w_b);
    let w_c = g.param(store, p.w_c);
    let b = g.matmul(u, w_b)?;
    let c = g.matmul(u, w_c)?;
    let a_log = g.param(store, p.a_log);
    let a = g.exp(a_log);
    let a = g.neg(a);
    let d = g.param(store, p.d_skip);
    let y = scan_op(g, u, delta, a, b, c, d)?;
    match direction {
        Direction::Forward => Ok(y),
        Direction::Backward => g.reverse(y, 0),
    }
}

/// Mamba block on `x` `(L × d)`:
/// `(u, z) = split(x·W_in)`, `u ← silu(causal_conv(u))`,
/// `y = selective_scan(u)`, `out = (y ⊙ silu(z))·W_out`.
pub fn mamba_block<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, p: &SsmParams, x: Var) -> Result<Var> {
    let (_, d) = g.value(x).dims2("mamba_block")?;
    if d != p.dims.d_model {
        return Err(TensorError::ShapeMismatch {
            op: "mamba_block",
            expected: vec![p.dims.d_model],
            actual: vec![d],
        });
    }
    let di = p.dims.d_inner;
    let w_in = g.param(store, p.w_in);
    let xz = g.matmul(x, w_in)?;
    let u = g.slice_cols(xz, 0, di)?;
    let z = g.slice_cols(xz, di, di)?;
    let conv_w = g.param(store, p.conv_w);
    let conv_b = g.param(store, p.conv_b);
    let u = g.depthwise_conv1d_causal(u, conv_w, conv_b)?;
    let u = g.silu(u);
    let y = selective_scan(g, store, p, u, Direction::Forward)?;
    let gate = g.silu(z);
    let y = g.mul(y, gate)?;
    let w_out = g.param(store, p.w_out);
    g.matmul(y, w_out)
}

/// Two independent Mamba branches, the second over the reversed sequence,
/// summed inside one pre-norm residual.
#[derive(Clone, Debug)]
pub struct BiMambaBlock {
    pub forward: SsmParams,
    pub backward: SsmParams,
    pub norm: ParamId,
}

impl BiMambaBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, dims: SsmDims, rng: &mut R) -> Self {
        let norm = store.add(format!("{prefix}.norm"), Tensor::ones(vec![dims.d_model]));
        let forward = SsmParams::new(store, &format!("{prefix}.fwd"), dims, rng);
        let backward = SsmParams::new(store, &format!("{prefix}.bwd"), dims, rng);
        Self { forward, backward, norm }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.norm];
        ids.extend(self.forward.ids());
        ids.extend(self.backward.ids());
        ids
    }

    pub fn param_count(dims: &SsmDims) -> usize {
        dims.d_model + 2 * dims.param_count()
    }
}

/// `x + mamba_fwd(x_n) + reverse(mamba_bwd(reverse(x_n)))` with `x_n = rms_norm(x)`.
pub fn bimamba_block<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, block: &BiMambaBlock, x: Var) -> Result<Var> {
    let norm = g.param(store, block.norm);
    let xn = g.rms_norm(x, norm, RMS_EPS)?;
    let fwd = mamba_block(g, store, &block.forward, xn)?;
    let xr = g.reverse(xn, 0)?;
    let bwd = mamba_block(g, store, &block.backward, xr)?;
    let bwd = g.reverse(bwd, 0)?;
    let branches = g.add(fwd, bwd)?;
    g.add(x, branches)
}
