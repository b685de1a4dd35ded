//! Analytic parameter, FLOP and peak-memory accounting, plus a measured
//! sequence-length scaling benchmark against a reference attention block.
//!
//! FLOPs follow the graph's [`CostCounter`](crate::CostCounter) conventions
//! (1 MAC = 2 FLOPs, one FLOP per elementwise output). The analytic model is
//! a replay of the forward pass: every tape entry the graph would record is
//! listed with its cost and size, so FLOP totals agree with the instrumented
//! counters exactly and the memory estimate follows the same timeline.

pub mod attention;
pub mod bench;

use serde::Serialize;

use crate::data::Scheme;
use crate::graph::{Graph, Var};
use crate::model::{Femba, HeadKind, ModelConfig, ModelError, Parts, DECODER_KERNEL};
use crate::params::ParamStore;
use crate::ssm::{BiMambaBlock, SsmDims};
use crate::tensor::{Scalar, Tensor};

pub use attention::{AttentionBlock, AttentionDims};
pub use bench::{bench_scaling, fit_loglog_slope, BenchConfig, BenchRow, ScalingReport};

/// Batch size used for peak-memory figures unless stated otherwise.
pub const MEMORY_BATCH: usize = 8;

/// Bytes per stored value; profiling assumes 32-bit training precision.
const VALUE_BYTES: usize = 4;
/// Bytes per shape entry.
const DIM_BYTES: usize = std::mem::size_of::<usize>();
/// Allowance for small per-op scratch (index lists, norms, boxed rules).
const SCRATCH_BYTES: usize = 16 * 1024;

/// Where a cost is attributed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Tokenizer,
    Blocks,
    EncoderNorm,
    Decoder,
    Head,
    Attention,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Tokenizer => "tokenizer",
            Component::Blocks => "encoder.blocks",
            Component::EncoderNorm => "encoder.norm",
            Component::Decoder => "decoder",
            Component::Head => "head",
            Component::Attention => "attention",
        }
    }
}

/// One tape entry of an analytic forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub component: Component,
    pub macs: u64,
    pub elementwise: u64,
    /// Values held by the entry.
    pub elems: usize,
    pub rank: usize,
    /// Whether the entry is a parameter leaf (a copy of stored weights).
    pub param: bool,
}

/// Analytic replay of one forward pass on a single window.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
    /// Largest scratch buffer any op allocates besides its output, in values.
    pub scratch_elems: usize,
}

impl Trace {
    fn push(&mut self, component: Component, macs: usize, elementwise: usize, shape: &[usize], param: bool) {
        self.entries.push(TraceEntry {
            component,
            macs: macs as u64,
            elementwise: elementwise as u64,
            elems: shape.iter().product(),
            rank: shape.len(),
            param,
        });
    }

    pub(crate) fn param(&mut self, c: Component, shape: &[usize]) {
        self.push(c, 0, 0, shape, true);
    }

    pub(crate) fn op(&mut self, c: Component, macs: usize, elementwise: usize, shape: &[usize]) {
        self.push(c, macs, elementwise, shape, false);
    }

    pub(crate) fn scratch(&mut self, elems: usize) {
        self.scratch_elems = self.scratch_elems.max(elems);
    }

    pub fn macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn elementwise(&self) -> u64 {
        self.entries.iter().map(|e| e.elementwise).sum()
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs() + self.elementwise()
    }

    /// FLOPs per component, in first-appearance order.
    pub fn flops_by_component(&self) -> Vec<(Component, u64)> {
        let mut out: Vec<(Component, u64)> = Vec::new();
        for e in &self.entries {
            let f = 2 * e.macs + e.elementwise;
            match out.iter_mut().find(|(c, _)| *c == e.component) {
                Some((_, v)) => *v += f,
                None => out.push((e.component, f)),
            }
        }
        out
    }

    /// Upper bound on heap bytes held by one graph at the end of the pass
    /// (no value is freed during a forward): every value and shape, the tape
    /// itself at its worst growth moment, the parameter lookup table and the
    /// scratch of the largest op.
    pub fn graph_bytes(&self, node_bytes: usize) -> usize {
        let values: usize = self.entries.iter().map(|e| e.elems * VALUE_BYTES + e.rank * DIM_BYTES).sum();
        let n = self.entries.len();
        let params = self.entries.iter().filter(|e| e.param).count();
        // Vec doubling: old and new buffers coexist during a reallocation.
        let tape = 3 * n.next_power_of_two().max(4) * node_bytes;
        // Hash table: (id, var) slots plus control bytes at load factor 7/8.
        let table = 2 * (params * 8 / 7 + 1).next_power_of_two().max(4) * (2 * DIM_BYTES + 1);
        values + tape + table + self.scratch_elems * VALUE_BYTES + SCRATCH_BYTES
    }

    /// Bytes of the largest single value, the scale of the quadratic term for
    /// attention.
    pub fn largest_value_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.elems * VALUE_BYTES).max().unwrap_or(0)
    }
}

fn trace_mamba(t: &mut Trace, c: Component, dims: &SsmDims, l: usize) {
    let SsmDims {
        d_model: d,
        d_inner: di,
        state: n,
        dt_rank: r,
        conv_width: k,
    } = *dims;
    t.param(c, &[d, 2 * di]);
    t.op(c, l * d * 2 * di, 0, &[l, 2 * di]);
    t.op(c, 0, 0, &[l, di]);
    t.op(c, 0, 0, &[l, di]);
    t.param(c, &[di, k]);
    t.param(c, &[di]);
    t.op(c, l * di * k, l * di, &[l, di]);
    t.op(c, 0, l * di, &[l, di]);
    // selective scan
    t.param(c, &[di, r]);
    t.param(c, &[r, di]);
    t.param(c, &[di]);
    t.op(c, l * di * r, 0, &[l, r]);
    t.op(c, l * r * di, 0, &[l, di]);
    t.op(c, 0, l * di, &[l, di]);
    t.op(c, 0, l * di, &[l, di]);
    t.param(c, &[di, n]);
    t.param(c, &[di, n]);
    t.op(c, l * di * n, 0, &[l, n]);
    t.op(c, l * di * n, 0, &[l, n]);
    t.param(c, &[di, n]);
    t.op(c, 0, di * n, &[di, n]);
    t.op(c, 0, di * n, &[di, n]);
    t.param(c, &[di]);
    t.op(c, 3 * l * di * n + l * di, 2 * l * di * n, &[l, di]);
    t.scratch(di * n);
    // gate and output projection
    t.op(c, 0, l * di, &[l, di]);
    t.op(c, 0, l * di, &[l, di]);
    t.param(c, &[di, d]);
    t.op(c, l * di * d, 0, &[l, d]);
}

fn trace_bimamba(t: &mut Trace, dims: &SsmDims, l: usize) {
    let c = Component::Blocks;
    let d = dims.d_model;
    t.param(c, &[d]);
    t.op(c, 0, 4 * l * d, &[l, d]);
    t.scratch(l);
    trace_mamba(t, c, dims, l);
    t.op(c, 0, 0, &[l, d]);
    trace_mamba(t, c, dims, l);
    t.op(c, 0, 0, &[l, d]);
    t.op(c, 0, l * d, &[l, d]);
    t.op(c, 0, l * d, &[l, d]);
}

/// Blocks and final norm over `(n × d)` tokens.
pub fn trace_encoder(t: &mut Trace, cfg: &ModelConfig, n: usize) {
    let dims = cfg.ssm_dims();
    for _ in 0..cfg.num_blocks {
        trace_bimamba(t, &dims, n);
    }
    let d = cfg.embed_dim;
    t.param(Component::EncoderNorm, &[d]);
    t.op(Component::EncoderNorm, 0, 4 * n * d, &[n, d]);
    t.scratch(n);
}

fn trace_tokenizer(t: &mut Trace, cfg: &ModelConfig) {
    let c = Component::Tokenizer;
    let (d, p, q) = (cfg.embed_dim, cfg.patch_c, cfg.patch_t);
    let (gc, gt) = (cfg.grid_c(), cfg.grid_t());
    let n = gc * gt;
    t.op(c, 0, 0, &[gc * p, gt * q]);
    t.param(c, &[d, p, q]);
    t.param(c, &[d]);
    t.op(c, d * n * p * q, d * n, &[d, gc, gt]);
    t.scratch(p * q);
    t.op(c, 0, 0, &[gt, gc, d]);
    t.op(c, 0, 0, &[n, d]);
    t.param(c, &[n, d]);
    t.op(c, 0, n * d, &[n, d]);
}

fn trace_decoder(t: &mut Trace, cfg: &ModelConfig) {
    let c = Component::Decoder;
    let (d, pq, n) = (cfg.embed_dim, cfg.patch_len(), cfg.num_tokens());
    let k = DECODER_KERNEL;
    t.param(c, &[d, d, k]);
    t.param(c, &[d]);
    t.op(c, n * d * d * k, n * d, &[n, d]);
    t.op(c, 0, n * d, &[n, d]);
    t.param(c, &[d, d, k]);
    t.param(c, &[d]);
    t.op(c, n * d * d * k, n * d, &[n, d]);
    t.param(c, &[d, pq]);
    t.param(c, &[pq]);
    t.op(c, n * d * pq, 0, &[n, pq]);
    t.op(c, 0, n * pq, &[n, pq]);
}

fn trace_head(t: &mut Trace, cfg: &ModelConfig, scheme: Scheme) {
    let c = Component::Head;
    let (d, h, n) = (cfg.embed_dim, cfg.head_hidden, cfg.num_tokens());
    let k = scheme.num_outputs();
    if cfg.head == HeadKind::MambaEnhanced {
        trace_mamba(t, c, &cfg.ssm_dims(), n);
        t.op(c, 0, n * d, &[n, d]);
    }
    let rows = if scheme.is_per_channel() {
        let (gc, gt) = (cfg.grid_c(), cfg.grid_t());
        t.op(c, 0, 0, &[gt, gc * d]);
        t.op(c, 0, n * d, &[gc * d]);
        t.op(c, 0, 0, &[gc, d]);
        gc
    } else {
        t.op(c, 0, n * d, &[d]);
        t.op(c, 0, 0, &[1, d]);
        1
    };
    t.param(c, &[d, h]);
    t.param(c, &[h]);
    t.op(c, rows * d * h, 0, &[rows, h]);
    t.op(c, 0, rows * h, &[rows, h]);
    t.op(c, 0, rows * h, &[rows, h]);
    t.param(c, &[h, k]);
    t.param(c, &[k]);
    t.op(c, rows * h * k, 0, &[rows, k]);
    t.op(c, 0, rows * k, &[rows, k]);
}

/// Analytic replay of [`forward`] on one window of the configured geometry.
pub fn trace_forward(cfg: &ModelConfig, parts: Parts) -> Trace {
    let mut t = Trace::default();
    trace_tokenizer(&mut t, cfg);
    trace_encoder(&mut t, cfg, cfg.num_tokens());
    if parts.decoder {
        trace_decoder(&mut t, cfg);
    }
    if let Some(scheme) = parts.head {
        trace_head(&mut t, cfg, scheme);
    }
    t
}

/// The profiled forward pass: tokenize and encode, then decode and/or
/// classify depending on which parts the model has. No masking.
pub fn forward<T: Scalar>(model: &Femba, g: &mut Graph<T>, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<Var>, ModelError> {
    let tok = model.tokenize(g, store, x)?;
    let enc = model.encode(g, store, tok)?;
    let mut outs = Vec::new();
    if model.decoder.is_some() {
        outs.push(model.decode(g, store, enc)?);
    }
    if model.head.is_some() {
        outs.push(model.classify(g, store, enc)?);
    }
    if outs.is_empty() {
        outs.push(enc);
    }
    Ok(outs)
}

/// Learnable scalars per component.
pub fn param_breakdown(cfg: &ModelConfig, parts: Parts) -> Vec<(Component, usize)> {
    let (d, p, q) = (cfg.embed_dim, cfg.patch_c, cfg.patch_t);
    let dims = cfg.ssm_dims();
    let mut out = vec![
        (Component::Tokenizer, d * p * q + d + cfg.num_tokens() * d),
        (Component::Blocks, cfg.num_blocks * BiMambaBlock::param_count(&dims)),
        (Component::EncoderNorm, d),
    ];
    if parts.decoder {
        let k = DECODER_KERNEL;
        out.push((Component::Decoder, 2 * (d * d * k + d) + d * p * q + p * q));
    }
    if let Some(scheme) = parts.head {
        let (h, k) = (cfg.head_hidden, scheme.num_outputs());
        let mamba = if cfg.head == HeadKind::MambaEnhanced { dims.param_count() } else { 0 };
        out.push((Component::Head, mamba + d * h + h + h * k + k));
    }
    out
}

/// Closed-form count of learnable scalars.
pub fn count_params(cfg: &ModelConfig, parts: Parts) -> usize {
    param_breakdown(cfg, parts).iter().map(|(_, n)| n).sum()
}

/// Forward FLOPs for `batch` windows of `(c × t)` samples.
pub fn count_flops(cfg: &ModelConfig, parts: Parts, batch: usize, c: usize, t: usize) -> Result<u64, ModelError> {
    let cfg = cfg.clone().with_input(c, t);
    cfg.validate()?;
    Ok(batch as u64 * trace_forward(&cfg, parts).flops())
}

/// Upper bound on peak bytes for `batch` windows of `(c × t)` processed
/// concurrently: stored parameters, the inputs, and one full forward graph
/// per window.
pub fn peak_memory(cfg: &ModelConfig, parts: Parts, batch: usize, c: usize, t: usize) -> Result<usize, ModelError> {
    let cfg = cfg.clone().with_input(c, t);
    cfg.validate()?;
    Ok(memory_terms(&cfg, parts, batch).total())
}

/// Peak-memory estimate split into its terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MemoryTerms {
    pub param_bytes: usize,
    pub input_bytes: usize,
    /// Bound for all live graphs together.
    pub activation_bytes: usize,
}

impl MemoryTerms {
    pub fn total(&self) -> usize {
        self.param_bytes + self.input_bytes + self.activation_bytes
    }
}

pub fn memory_terms(cfg: &ModelConfig, parts: Parts, batch: usize) -> MemoryTerms {
    let trace = trace_forward(cfg, parts);
    MemoryTerms {
        param_bytes: count_params(cfg, parts) * VALUE_BYTES,
        input_bytes: batch * cfg.channels * cfg.samples * VALUE_BYTES,
        activation_bytes: batch * trace.graph_bytes(Graph::<f32>::node_bytes()),
    }
}

/// Parameters, forward FLOPs and peak memory for one `(config, batch, C, T)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub variant: String,
    pub channels: usize,
    pub samples: usize,
    pub tokens: usize,
    pub batch: usize,
    pub params: usize,
    pub flops: u64,
    pub peak_bytes: usize,
    pub memory_batch: usize,
    pub param_breakdown: Vec<(Component, usize)>,
    pub flop_breakdown: Vec<(Component, u64)>,
    pub memory: MemoryTerms,
}

impl CostReport {
    /// FLOPs are reported for `batch` windows; peak memory for
    /// `memory_batch` windows.
    pub fn new(cfg: &ModelConfig, parts: Parts, batch: usize, memory_batch: usize, c: usize, t: usize) -> Result<Self, ModelError> {
        let cfg = cfg.clone().with_input(c, t);
        cfg.validate()?;
        let trace = trace_forward(&cfg, parts);
        let b = batch as u64;
        let flop_breakdown: Vec<(Component, u64)> = trace.flops_by_component().into_iter().map(|(k, f)| (k, f * b)).collect();
        let memory = memory_terms(&cfg, parts, memory_batch);
        Ok(Self {
            variant: cfg.name.to_string(),
            channels: c,
            samples: t,
            tokens: cfg.num_tokens(),
            batch,
            params: count_params(&cfg, parts),
            flops: flop_breakdown.iter().map(|(_, f)| f).sum(),
            peak_bytes: memory.total(),
            memory_batch,
            param_breakdown: param_breakdown(&cfg, parts),
            flop_breakdown,
            memory,
        })
    }
}

impl std::fmt::Display for CostReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "variant {} input {}x{} ({} tokens) batch {}",
            self.variant, self.channels, self.samples, self.tokens, self.batch
        )?;
        writeln!(f, "params {:>16}", self.params)?;
        for (c, n) in &self.param_breakdown {
            writeln!(f, "  {:<14} {:>14}", c.name(), n)?;
        }
        writeln!(f, "flops  {:>16}  (1 MAC = 2 FLOPs)", self.flops)?;
        for (c, n) in &self.flop_breakdown {
            writeln!(f, "  {:<14} {:>14}", c.name(), n)?;
        }
        writeln!(f, "peak memory at batch {}: {} bytes", self.memory_batch, self.peak_bytes)?;
        writeln!(f, "  {:<14} {:>14}", "parameters", self.memory.param_bytes)?;
        writeln!(f, "  {:<14} {:>14}", "inputs", self.memory.input_bytes)?;
        write!(f, "  {:<14} {:>14}", "activations", self.memory.activation_bytes)
    }
}

/// Published forward FLOPs and peak memory for the four presets. Context
/// only: the input shapes behind them are unknown.
pub const REFERENCE_ROWS: [(&str, f64, f64); 4] = [
    ("tiny", 1.31e9, 53.36e6),
    ("base", 7.52e9, 240.50e6),
    ("large", 12.48e9, 548.71e6),
    ("huge", 58.74e9, 1886.17e6),
];

pub const CSV_HEADER: &str = "variant,L,batch,params,flops,bytes,wallclock_ms";

/// One `variant,L,batch,params,flops,bytes,wallclock_ms` line; absent
/// fields are left empty.
pub fn csv_row(variant: &str, l: Option<usize>, batch: Option<usize>, params: Option<usize>, flops: f64, bytes: f64, wallclock_ms: Option<f64>) -> String {
    let opt = |v: Option<String>| v.unwrap_or_default();
    format!(
        "{variant},{},{},{},{flops},{bytes},{}",
        opt(l.map(|v| v.to_string())),
        opt(batch.map(|v| v.to_string())),
        opt(params.map(|v| v.to_string())),
        opt(wallclock_ms.map(|v| format!("{v:.3}")))
    )
}

/// Reference rows in CSV form, variants prefixed `reference-`.
pub fn reference_csv_rows() -> Vec<String> {
    REFERENCE_ROWS
        .iter()
        .map(|(v, f, b)| csv_row(&format!("reference-{v}"), None, None, None, *f, *b, None))
        .collect()
}
