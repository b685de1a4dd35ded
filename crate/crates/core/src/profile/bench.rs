//! Measured forward time versus sequence length for the encoder stack and a
//! parameter-matched attention stack.

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::graph::Graph;
use crate::model::ModelConfig;
use crate::params::{init, ParamStore};
use crate::ssm::{self, BiMambaBlock};
use crate::tensor::{Result, Tensor, TensorError};

use super::attention::{trace_attention, AttentionBlock, AttentionDims};
use super::{csv_row, trace_encoder, Component, Trace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Token counts, ascending.
    pub lengths: Vec<usize>,
    /// Timed repetitions per point (at least 3).
    pub reps: usize,
    /// Upper limit when a point is rerun because of timing spread.
    pub max_reps: usize,
    /// Coefficient of variation above which a point is rerun.
    pub max_spread: f64,
    pub heads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: (8..=13).map(|e| 1 << e).collect(),
            reps: 5,
            max_reps: 24,
            max_spread: 0.2,
            heads: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: String,
    pub length: usize,
    pub batch: usize,
    pub params: usize,
    pub flops: u64,
    /// Analytic bound on graph bytes plus stored parameters.
    pub bytes: usize,
    /// Median over repetitions.
    pub wallclock_ms: f64,
    pub reps: usize,
    /// Coefficient of variation of the timed repetitions.
    pub spread: f64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        csv_row(
            &self.variant,
            Some(self.length),
            Some(self.batch),
            Some(self.params),
            self.flops as f64,
            self.bytes as f64,
            Some(self.wallclock_ms),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingReport {
    pub rows: Vec<BenchRow>,
    pub encoder_slope: f64,
    pub attention_slope: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn spread(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Times every point in interleaved rounds so slow periods of the machine
/// hit all lengths alike. Rounds are added (doubling) while any point's
/// spread exceeds `max_spread`, up to `max_reps`. Returns per point
/// (median ms, reps, spread).
fn time_points(cfg: &BenchConfig, points: usize, mut run: impl FnMut(usize) -> Result<()>) -> Result<Vec<(f64, usize, f64)>> {
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); points];
    let mut target = cfg.reps;
    loop {
        while samples[0].len() < target {
            for (i, s) in samples.iter_mut().enumerate() {
                let t0 = Instant::now();
                run(i)?;
                s.push(t0.elapsed().as_secs_f64() * 1e3);
            }
        }
        let worst = samples.iter().map(|s| spread(s)).fold(0.0, f64::max);
        if worst <= cfg.max_spread || target >= cfg.max_reps {
            if worst > cfg.max_spread {
                warn!("timing spread {worst:.2} still above {} after {target} reps", cfg.max_spread);
            }
            return Ok(samples
                .iter()
                .map(|s| (median(&mut s.clone()), s.len(), spread(s)))
                .collect());
        }
        info!("timing spread {worst:.2} above {}; rerunning with {} reps", cfg.max_spread, 2 * target);
        target = (2 * target).min(cfg.max_reps);
    }
}

/// Runs single-threaded forwards of the encoder stack of `model` (its
/// bidirectional blocks and final norm on random tokens) and of an attention
/// stack with the same depth and per-block parameter count, at every length.
pub fn bench_scaling(model: &ModelConfig, cfg: &BenchConfig) -> Result<ScalingReport> {
    if cfg.lengths.len() < 2 || cfg.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TensorError::Invalid {
            op: "bench_scaling",
            detail: "need at least two strictly ascending lengths".into(),
        });
    }
    if cfg.reps < 3 {
        return Err(TensorError::Invalid {
            op: "bench_scaling",
            detail: format!("need at least 3 repetitions, got {}", cfg.reps),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = model.ssm_dims();
    let d = dims.d_model;

    let mut enc_store = ParamStore::<f32>::new();
    let blocks: Vec<BiMambaBlock> = (0..model.num_blocks)
        .map(|k| BiMambaBlock::new(&mut enc_store, &format!("encoder.blocks.{k}"), dims, &mut rng))
        .collect();
    let norm = enc_store.add("encoder.norm", Tensor::ones(vec![d]));

    let adims = AttentionDims::matched(&dims, cfg.heads)?;
    let mut attn_store = ParamStore::<f32>::new();
    let attn: Vec<AttentionBlock> = (0..model.num_blocks)
        .map(|k| AttentionBlock::new(&mut attn_store, &format!("attention.{k}"), adims, &mut rng))
        .collect();

    let run_encoder = |x: &Tensor<f32>| -> Result<()> {
        let mut g = Graph::inference();
        let mut h = g.constant(x.clone());
        for b in &blocks {
            h = ssm::bimamba_block(&mut g, &enc_store, b, h)?;
        }
        let w = g.param(&enc_store, norm);
        g.rms_norm(h, w, ssm::RMS_EPS)?;
        Ok(())
    };
    let run_attention = |x: &Tensor<f32>| -> Result<()> {
        let mut g = Graph::inference();
        let mut h = g.constant(x.clone());
        for b in &attn {
            h = b.forward(&mut g, &attn_store, h)?;
        }
        Ok(())
    };

    let node = Graph::<f32>::node_bytes();
    let enc_params = enc_store.num_elements();
    let attn_params = attn_store.num_elements();
    let inputs: Vec<Tensor<f32>> = cfg.lengths.iter().map(|&l| init::normal(&mut rng, &[l, d], 1.0)).collect();
    run_encoder(&inputs[0])?;
    run_attention(&inputs[0])?;
    let enc_times = time_points(cfg, inputs.len(), |i| run_encoder(&inputs[i]))?;
    let attn_times = time_points(cfg, inputs.len(), |i| run_attention(&inputs[i]))?;

    let mut rows = Vec::new();
    for (i, &l) in cfg.lengths.iter().enumerate() {
        let mut t = Trace::default();
        t.op(Component::Blocks, 0, 0, &[l, d]);
        trace_encoder(&mut t, model, l);
        let (ms, reps, s) = enc_times[i];
        info!("encoder L={l}: {ms:.2} ms over {reps} reps");
        rows.push(BenchRow {
            variant: format!("femba-{}", model.name),
            length: l,
            batch: 1,
            params: enc_params,
            flops: t.flops(),
            bytes: t.graph_bytes(node) + enc_params * 4,
            wallclock_ms: ms,
            reps,
            spread: s,
        });

        let mut t = Trace::default();
        t.op(Component::Attention, 0, 0, &[l, d]);
        for _ in 0..model.num_blocks {
            trace_attention(&mut t, &adims, l);
        }
        let (ms, reps, s) = attn_times[i];
        info!("attention L={l}: {ms:.2} ms over {reps} reps");
        rows.push(BenchRow {
            variant: "attention".into(),
            length: l,
            batch: 1,
            params: attn_params,
            flops: t.flops(),
            bytes: t.graph_bytes(node) + attn_params * 4,
            wallclock_ms: ms,
            reps,
            spread: s,
        });
    }
    let slope = |prefix: &str| {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.variant.starts_with(prefix))
            .map(|r| (r.length as f64, r.wallclock_ms))
            .collect();
        fit_loglog_slope(&pts)
    };
    Ok(ScalingReport {
        encoder_slope: slope("femba"),
        attention_slope: slope("attention"),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.5))).collect();
        assert!((fit_loglog_slope(&pts) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_bench_runs() {
        let model = ModelConfig::custom(1, 8, 4);
        let cfg = BenchConfig {
            lengths: vec![8, 16],
            ..BenchConfig::default()
        };
        let r = bench_scaling(&model, &cfg).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.rows.iter().all(|row| row.reps >= 3 && row.wallclock_ms > 0.0));
        assert!(bench_scaling(&model, &BenchConfig { lengths: vec![16, 8], ..cfg }).is_err());
    }
}
