//! Masked-reconstruction pre-training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::graph::Graph;
use crate::model::{extract_patches, mask_seed, sample_mask, Femba};
use crate::optim::{adam_step, cosine_lr, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::{batch_mean, masked_loss, set_grads, Grads, LogLine, Result, Split, TrainConfig, TrainError};

/// Validation masks come from a separate seed stream so they never change
/// during a run.
const VAL_STREAM: u64 = 0x76_61_6c;

pub struct PretrainReport {
    pub log: Vec<LogLine>,
    pub best_val: f64,
    pub best_step: u64,
    /// Parameters at the best validation loss.
    pub best: ParamStore<f32>,
    /// Lowest per-step training loss seen.
    pub best_train: f64,
}

/// Loss and gradients of one window under one mask seed.
pub fn reconstruction_sample(
    model: &Femba,
    store: &ParamStore<f32>,
    x: &Tensor<f32>,
    seed: u64,
    beta: f64,
    with_grads: bool,
) -> Result<(f64, Grads)> {
    let cfg = &model.config;
    let mask = sample_mask(cfg.num_tokens(), cfg.mask_ratio, seed)?;
    if mask.is_empty() {
        return Err(TrainError::EmptyMask);
    }
    let target = extract_patches(x, cfg)?;
    let mut g = if with_grads { Graph::new() } else { Graph::inference() };
    let pred = model.reconstruct(&mut g, store, x, &mask)?;
    let loss = masked_loss(&mut g, pred, &target, &mask, beta)?;
    let value = g.value(loss).data()[0] as f64;
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    Ok((value, g.param_grads(&grads, store.len())))
}

/// Mean masked loss over `windows` with the fixed validation masks.
pub fn validation_loss(model: &Femba, store: &ParamStore<f32>, windows: &[Tensor<f32>], cfg: &TrainConfig) -> Result<f64> {
    let losses: Vec<Result<f64>> = windows
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let seed = mask_seed(cfg.seed ^ VAL_STREAM, 0, i as u64);
            reconstruction_sample(model, store, x, seed, cfg.beta_smooth_l1, false).map(|r| r.0)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / windows.len() as f64)
}

/// Runs `cfg.total_steps` Adam steps of masked reconstruction with a cosine
/// schedule. Every window of a batch gets a fresh mask seeded by
/// `(seed, step, window)`. Validation runs every `val_every` steps and at the
/// end; the best-validation parameters are kept.
pub fn pretrain(
    model: &Femba,
    store: &mut ParamStore<f32>,
    train: &[Tensor<f32>],
    val: &[Tensor<f32>],
    cfg: &TrainConfig,
    on_log: &mut dyn FnMut(&LogLine),
) -> Result<PretrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Data("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(TrainError::Data("validation set is empty".into()));
    }
    if model.decoder.is_none() {
        return Err(crate::model::ModelError::Missing("decoder").into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut adam = AdamState::new(store, cfg.adam);
    let mut log = Vec::new();
    let mut emit = |line: LogLine, log: &mut Vec<LogLine>| {
        on_log(&line);
        log.push(line);
    };
    let mut best = (f64::INFINITY, 0, store.clone());
    let mut best_train = f64::INFINITY;
    let batch = cfg.batch_size.min(train.len());

    for step in 0..cfg.total_steps {
        let mut items = Vec::with_capacity(batch);
        while items.len() < batch {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            items.push(order[cursor]);
            cursor += 1;
        }
        let lr = cosine_lr(step, cfg.total_steps, cfg.base_lr);
        let (loss, grads) = batch_mean(&items, store.len(), |i| {
            let seed = mask_seed(cfg.seed, step, i as u64);
            reconstruction_sample(model, store, &train[i], seed, cfg.beta_smooth_l1, true)
        })?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, loss });
        }
        best_train = best_train.min(loss);
        emit(
            LogLine {
                step,
                split: Split::Train,
                loss,
                lr,
            },
            &mut log,
        );
        set_grads(store, &grads)?;
        adam_step(store, &mut adam, |_| lr)?;

        let done = step + 1;
        if done % cfg.val_every == 0 || done == cfg.total_steps {
            let v = validation_loss(model, store, val, cfg)?;
            if !v.is_finite() {
                return Err(TrainError::NonFinite { step: done, loss: v });
            }
            emit(
                LogLine {
                    step: done,
                    split: Split::Val,
                    loss: v,
                    lr,
                },
                &mut log,
            );
            if v < best.0 {
                best = (v, done, store.clone());
            }
        }
    }
    store.zero_grad();
    Ok(PretrainReport {
        log,
        best_val: best.0,
        best_step: best.1,
        best: best.2,
        best_train,
    })
}
