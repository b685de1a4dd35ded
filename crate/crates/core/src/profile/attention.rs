//! Reference self-attention block for the scaling comparison.
//!
//! Pre-norm multi-head self-attention followed by a pre-norm GELU MLP, each
//! inside a residual. The MLP width is chosen so the block's parameter count
//! is as close as possible to one bidirectional Mamba block of the same
//! model width; only the sequence-length dependence then differs.

use rand::Rng;
use serde::Serialize;

use crate::graph::{Graph, Var};
use crate::params::{init, ParamId, ParamStore};
use crate::ssm::{BiMambaBlock, SsmDims, RMS_EPS};
use crate::tensor::{Result, Scalar, TensorError};

use super::{Component, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AttentionDims {
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl AttentionDims {
    /// Dimensions whose parameter count is nearest to one bidirectional
    /// Mamba block with branch sizes `ssm`. `heads` must divide `d_model`.
    pub fn matched(ssm: &SsmDims, heads: usize) -> Result<Self> {
        let d = ssm.d_model;
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(TensorError::Invalid {
                op: "attention",
                detail: format!("{heads} heads do not divide width {d}"),
            });
        }
        let target = BiMambaBlock::param_count(ssm) as f64;
        let fixed = (3 * d + 4 * d * d) as f64;
        let hidden = ((target - fixed) / (2 * d + 1) as f64).round().max(1.0) as usize;
        Ok(Self {
            d_model: d,
            heads,
            mlp_hidden: hidden,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Two norms, `4·d²` projection weights, MLP weights and biases.
    pub fn param_count(&self) -> usize {
        let (d, h) = (self.d_model, self.mlp_hidden);
        3 * d + 4 * d * d + h * (2 * d + 1)
    }
}

struct HeadParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

pub struct AttentionBlock {
    pub dims: AttentionDims,
    norm1: ParamId,
    heads: Vec<HeadParams>,
    norm2: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

impl AttentionBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, dims: AttentionDims, rng: &mut R) -> Self {
        let (d, dh, h) = (dims.d_model, dims.head_dim(), dims.mlp_hidden);
        let name = |s: String| format!("{prefix}.{s}");
        let norm1 = store.add(name("norm1".into()), crate::Tensor::ones(vec![d]));
        let heads = (0..dims.heads)
            .map(|i| HeadParams {
                wq: store.add(name(format!("heads.{i}.wq")), init::fan_in(rng, &[d, dh], d)),
                wk: store.add(name(format!("heads.{i}.wk")), init::fan_in(rng, &[d, dh], d)),
                wv: store.add(name(format!("heads.{i}.wv")), init::fan_in(rng, &[d, dh], d)),
                wo: store.add(name(format!("heads.{i}.wo")), init::fan_in(rng, &[dh, d], d)),
            })
            .collect();
        let norm2 = store.add(name("norm2".into()), crate::Tensor::ones(vec![d]));
        Self {
            dims,
            norm1,
            heads,
            norm2,
            fc1_w: store.add(name("fc1_w".into()), init::fan_in(rng, &[d, h], d)),
            fc1_b: store.add(name("fc1_b".into()), init::fan_in(rng, &[h], d)),
            fc2_w: store.add(name("fc2_w".into()), init::fan_in(rng, &[h, d], h)),
            fc2_b: store.add(name("fc2_b".into()), init::fan_in(rng, &[d], h)),
        }
    }

    /// `x1 = x + Σ_h softmax(q_h·k_hᵀ/√d_h)·v_h·W_o,h` with q, k, v from
    /// `rms_norm(x)`, then `x1 + MLP(rms_norm(x1))`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n1 = g.param(store, self.norm1);
        let xn = g.rms_norm(x, n1, RMS_EPS)?;
        let scale = T::lit(1.0 / (self.dims.head_dim() as f64).sqrt());
        let mut attn: Option<Var> = None;
        for hp in &self.heads {
            let wq = g.param(store, hp.wq);
            let q = g.matmul(xn, wq)?;
            let q = g.scale(q, scale);
            let wk = g.param(store, hp.wk);
            let k = g.matmul(xn, wk)?;
            let wv = g.param(store, hp.wv);
            let v = g.matmul(xn, wv)?;
            let kt = g.permute(k, &[1, 0])?;
            let s = g.matmul(q, kt)?;
            let p = g.softmax(s)?;
            let o = g.matmul(p, v)?;
            let wo = g.param(store, hp.wo);
            let o = g.matmul(o, wo)?;
            attn = Some(match attn {
                Some(a) => g.add(a, o)?,
                None => o,
            });
        }
        let x1 = g.add(x, attn.expect("at least one head"))?;
        let n2 = g.param(store, self.norm2);
        let xn = g.rms_norm(x1, n2, RMS_EPS)?;
        let w1 = g.param(store, self.fc1_w);
        let b1 = g.param(store, self.fc1_b);
        let m = g.matmul(xn, w1)?;
        let m = g.add_row(m, b1)?;
        let m = g.gelu(m);
        let w2 = g.param(store, self.fc2_w);
        let b2 = g.param(store, self.fc2_b);
        let m = g.matmul(m, w2)?;
        let m = g.add_row(m, b2)?;
        g.add(x1, m)
    }
}

/// Analytic replay of [`AttentionBlock::forward`] over `n` tokens.
pub fn trace_attention(t: &mut Trace, dims: &AttentionDims, n: usize) {
    let c = Component::Attention;
    let (d, dh, h) = (dims.d_model, dims.head_dim(), dims.mlp_hidden);
    t.param(c, &[d]);
    t.op(c, 0, 4 * n * d, &[n, d]);
    for i in 0..dims.heads {
        t.param(c, &[d, dh]);
        t.op(c, n * d * dh, 0, &[n, dh]);
        t.op(c, 0, n * dh, &[n, dh]);
        t.param(c, &[d, dh]);
        t.op(c, n * d * dh, 0, &[n, dh]);
        t.param(c, &[d, dh]);
        t.op(c, n * d * dh, 0, &[n, dh]);
        t.op(c, 0, 0, &[dh, n]);
        t.op(c, n * dh * n, 0, &[n, n]);
        t.op(c, 0, 3 * n * n, &[n, n]);
        t.op(c, n * n * dh, 0, &[n, dh]);
        t.param(c, &[dh, d]);
        t.op(c, n * dh * d, 0, &[n, d]);
        if i > 0 {
            t.op(c, 0, n * d, &[n, d]);
        }
    }
    t.scratch(n);
    t.op(c, 0, n * d, &[n, d]);
    t.param(c, &[d]);
    t.op(c, 0, 4 * n * d, &[n, d]);
    t.param(c, &[d, h]);
    t.param(c, &[h]);
    t.op(c, n * d * h, 0, &[n, h]);
    t.op(c, 0, n * h, &[n, h]);
    t.op(c, 0, n * h, &[n, h]);
    t.param(c, &[h, d]);
    t.param(c, &[d]);
    t.op(c, n * h * d, 0, &[n, d]);
    t.op(c, 0, n * d, &[n, d]);
    t.op(c, 0, n * d, &[n, d]);
}

/// Forward FLOPs of one attention block over `n` tokens.
pub fn attention_flops(dims: &AttentionDims, n: usize) -> u64 {
    let mut t = Trace::default();
    trace_attention(&mut t, dims, n);
    t.flops()
}
