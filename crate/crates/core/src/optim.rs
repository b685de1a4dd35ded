//! Adam with bias correction and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {name}; step aborted")]
    NonFiniteGradient { name: String },
    #[error("learning rate must be finite and non-negative, got {0}")]
    InvalidLearningRate(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay. Off by default.
    pub weight_decay: f64,
    /// Global gradient-norm clip. Off by default.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update using the gradients accumulated in `store`.
///
/// `lr_for` gives the learning rate of each parameter, which is how
/// per-group rates are applied. Frozen parameters and parameters without a
/// gradient are left untouched. Any non-finite gradient aborts the whole
/// step before anything is modified.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr_for: impl Fn(ParamId) -> f64,
) -> Result<(), OptimError> {
    let mut sq_norm = 0.0;
    for (_, p) in store.iter() {
        if let Some(g) = &p.grad {
            if !g.all_finite() {
                return Err(OptimError::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
            sq_norm += g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
        }
    }
    let ids: Vec<ParamId> = store.ids().collect();
    let lrs: Vec<f64> = ids.iter().map(|&id| lr_for(id)).collect();
    if let Some(&bad) = lrs.iter().find(|lr| **lr < 0.0 || !lr.is_finite()) {
        return Err(OptimError::InvalidLearningRate(bad));
    }
    let clip_scale = match state.config.grad_clip {
        Some(max) if sq_norm.sqrt() > max => max / sq_norm.sqrt(),
        _ => 1.0,
    };

    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, lr) in ids.into_iter().zip(lrs) {
        let p = store.get_mut(id);
        if !p.requires_grad || lr == 0.0 {
            continue;
        }
        let Some(grad) = &p.grad else { continue };
        let m = state.m[id.index()].data_mut();
        let v = state.v[id.index()].data_mut();
        for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            let g = g.as_f64() * clip_scale;
            let m_new = cfg.beta1 * mi.as_f64() + (1.0 - cfg.beta1) * g;
            let v_new = cfg.beta2 * vi.as_f64() + (1.0 - cfg.beta2) * g * g;
            *mi = T::lit(m_new);
            *vi = T::lit(v_new);
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            let wf = w.as_f64();
            let update = m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * wf;
            *w = T::lit(wf - lr * update);
        }
    }
    Ok(())
}

/// `0.5·base·(1 + cos(π·step/total))`, no warmup. Steps past `total` clamp to 0.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    if step > total_steps {
        log::warn!("cosine_lr: step {step} beyond total {total_steps}; clamping to 0");
        return 0.0;
    }
    if step == total_steps {
        return 0.0;
    }
    let frac = step as f64 / total_steps as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * frac).cos())
}
