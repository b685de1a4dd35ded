//! Losses, learning-rate ladders, pre-training and fine-tuning loops, metrics.

pub mod finetune;
pub mod loss;
pub mod lr;
pub mod metrics;
pub mod pretrain;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::optim::{AdamConfig, OptimError};
use crate::params::ParamStore;
use crate::tensor::{Tensor, TensorError};

pub use finetune::{evaluate, finetune, EarlyStopper, FinetuneReport};
pub use loss::{label_loss, masked_loss, smooth_l1};
pub use lr::{layerwise_lrs, LayerLrs};
pub use metrics::{aupr, auroc, balanced_accuracy, MetricReport};
pub use pretrain::{pretrain, PretrainReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("masked loss is undefined for an empty mask")]
    EmptyMask,
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
    #[error("invalid config field {field}: {detail}")]
    Config { field: String, detail: String },
    #[error("label arity: {0}")]
    Arity(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Optimizer steps for pre-training.
    pub total_steps: u64,
    /// Maximum epochs for fine-tuning.
    pub epochs: usize,
    pub batch_size: usize,
    pub beta_smooth_l1: f64,
    pub layer_decay: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Pre-training validation interval in steps.
    pub val_every: u64,
    /// Fine-tune the head only.
    pub freeze_encoder: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: crate::DEFAULT_LR,
            total_steps: 1000,
            epochs: 30,
            batch_size: 8,
            beta_smooth_l1: 1.0,
            layer_decay: crate::DEFAULT_LAYER_DECAY,
            early_stop_patience: 5,
            seed: 0,
            val_every: 50,
            freeze_encoder: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| {
            Err(TrainError::Config {
                field: format!("train.{field}"),
                detail,
            })
        };
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", format!("must be positive, got {}", self.base_lr));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return bad("layer_decay", format!("must lie in (0, 1], got {}", self.layer_decay));
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.beta_smooth_l1.is_nan() || self.beta_smooth_l1 <= 0.0 {
            return bad("beta_smooth_l1", format!("must be positive, got {}", self.beta_smooth_l1));
        }
        if self.val_every == 0 {
            return bad("val_every", "must be at least 1".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) {
            return bad("adam.beta1", format!("must lie in [0, 1), got {}", a.beta1));
        }
        if !(0.0..1.0).contains(&a.beta2) {
            return bad("adam.beta2", format!("must lie in [0, 1), got {}", a.beta2));
        }
        if a.eps.is_nan() || a.eps <= 0.0 {
            return bad("adam.eps", format!("must be positive, got {}", a.eps));
        }
        if a.weight_decay < 0.0 {
            return bad("adam.weight_decay", format!("must be non-negative, got {}", a.weight_decay));
        }
        if a.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("adam.grad_clip", "must be positive when set".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One training-log record, written as `step,split,loss,lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogLine {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub lr: f64,
}

impl std::fmt::Display for LogLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let split = match self.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        write!(f, "{},{},{:.8},{:.6e}", self.step, split, self.loss, self.lr)
    }
}

pub type Grads = Vec<Option<Tensor<f32>>>;

/// Evaluates `sample` on every item in parallel, then averages losses and
/// gradients in item order so the result does not depend on scheduling.
pub(crate) fn batch_mean<F>(items: &[usize], num_params: usize, sample: F) -> Result<(f64, Grads)>
where
    F: Fn(usize) -> Result<(f64, Grads)> + Sync,
{
    let results: Vec<Result<(f64, Grads)>> = items.par_iter().map(|&i| sample(i)).collect();
    let scale = 1.0 / items.len() as f32;
    let mut total = 0.0;
    let mut acc: Grads = vec![None; num_params];
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        for (a, g) in acc.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match a {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
                None => *a = Some(g),
            }
        }
    }
    for g in acc.iter_mut().flatten() {
        for x in g.data_mut() {
            *x *= scale;
        }
    }
    Ok((total / items.len() as f64, acc))
}

/// Loads averaged gradients into the store, replacing old ones.
pub(crate) fn set_grads(store: &mut ParamStore<f32>, grads: &Grads) -> Result<()> {
    store.zero_grad();
    store.accumulate(grads)?;
    Ok(())
}
