//! Supervised fine-tuning with layer-wise rates and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Label;
use crate::graph::{self, Graph};
use crate::model::{Femba, ModelError};
use crate::optim::{adam_step, cosine_lr, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::metrics::{argmax, aupr, auroc, balanced_accuracy, recalls, MetricReport};
use super::{batch_mean, label_loss, layerwise_lrs, set_grads, Grads, LogLine, Result, Split, TrainConfig, TrainError};

pub struct FinetuneReport {
    pub log: Vec<LogLine>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// 1-based epoch of the best validation loss.
    pub best_epoch: usize,
    pub best_val: f64,
    pub best: ParamStore<f32>,
    pub trainable_params: usize,
}

/// Tracks the best validation loss and signals a stop after `patience`
/// epochs without improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records epoch `epoch` (1-based). Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

fn check_arity(model: &Femba, label: &Label) -> Result<()> {
    let head = model.head.as_ref().ok_or(ModelError::Missing("head"))?;
    let k = head.scheme.num_outputs();
    let rows = model.config.grid_c();
    let ok = match label {
        Label::Class(c) => !head.scheme.is_per_channel() && *c < k,
        Label::MultiHot { rows: r, types, .. } => head.scheme.is_per_channel() && *r == rows && *types == k,
        Label::RowClasses { types, values } => head.scheme.is_per_channel() && values.len() == rows && *types == k,
    };
    if ok {
        Ok(())
    } else {
        Err(TrainError::Arity(format!(
            "label {label:?} does not match head for scheme {} with {rows} channel rows",
            head.scheme
        )))
    }
}

fn sample_loss(model: &Femba, store: &ParamStore<f32>, x: &Tensor<f32>, label: &Label) -> Result<(f64, Grads)> {
    let mut g = Graph::new();
    let logits = model.logits(&mut g, store, x)?;
    let loss = label_loss(&mut g, logits, label)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).data()[0] as f64, g.param_grads(&grads, store.len())))
}

/// Forward-only loss and logits.
pub fn predict(model: &Femba, store: &ParamStore<f32>, x: &Tensor<f32>, label: &Label) -> Result<(f64, Tensor<f32>)> {
    let mut g = Graph::inference();
    let logits = model.logits(&mut g, store, x)?;
    let loss = label_loss(&mut g, logits, label)?;
    Ok((g.value(loss).data()[0] as f64, g.value(logits).clone()))
}

/// Loss and metrics over a labeled set.
///
/// Window-level schemes use softmax probabilities and argmax decisions; with
/// more than two classes AUROC/AUPR are one-vs-rest macro averages over the
/// classes where they are defined. Per-channel schemes flatten every
/// `(row, type)` output into one binary problem thresholded at logit 0.
pub fn evaluate(model: &Femba, store: &ParamStore<f32>, set: &[(Tensor<f32>, Label)]) -> Result<MetricReport> {
    if set.is_empty() {
        return Err(TrainError::Data("evaluation set is empty".into()));
    }
    for (_, l) in set {
        check_arity(model, l)?;
    }
    let outs: Vec<Result<(f64, Tensor<f32>)>> = set.par_iter().map(|(x, l)| predict(model, store, x, l)).collect();
    let mut loss = 0.0;
    let mut logits = Vec::with_capacity(set.len());
    for o in outs {
        let (l, z) = o?;
        loss += l;
        logits.push(z);
    }
    loss /= set.len() as f64;

    let per_channel = model.head.as_ref().is_some_and(|h| h.scheme.is_per_channel());
    if per_channel {
        let (mut scores, mut truth) = (Vec::new(), Vec::new());
        for ((_, label), z) in set.iter().zip(&logits) {
            let (_, _, t) = label.binary_targets().expect("per-channel label");
            scores.extend(z.data().iter().map(|&v| graph::sigmoid(v as f64)));
            truth.extend(t.iter().map(|&v| v > 0.5));
        }
        let preds: Vec<usize> = scores.iter().map(|&s| usize::from(s > 0.5)).collect();
        let labels: Vec<usize> = truth.iter().map(|&b| usize::from(b)).collect();
        return Ok(MetricReport {
            auroc: auroc(&scores, &truth),
            aupr: aupr(&scores, &truth),
            balanced_accuracy: balanced_accuracy(&preds, &labels, 2),
            loss,
            recalls: recalls(&preds, &labels, 2),
        });
    }

    let k = logits[0].numel();
    let probs: Vec<Vec<f64>> = logits
        .iter()
        .map(|z| {
            let v: Vec<f64> = z.data().iter().map(|&x| x as f64).collect();
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let labels: Vec<usize> = set.iter().map(|(_, l)| l.class().expect("class label")).collect();
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let one_vs_rest = |c: usize| {
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let t: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        (auroc(&s, &t), aupr(&s, &t))
    };
    let (roc, pr) = if k == 2 {
        one_vs_rest(1)
    } else {
        let per: Vec<(Option<f64>, Option<f64>)> = (0..k).map(one_vs_rest).collect();
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        (
            mean(per.iter().filter_map(|p| p.0).collect()),
            mean(per.iter().filter_map(|p| p.1).collect()),
        )
    };
    Ok(MetricReport {
        auroc: roc,
        aupr: pr,
        balanced_accuracy: balanced_accuracy(&preds, &labels, k),
        loss,
        recalls: recalls(&preds, &labels, k),
    })
}

/// Trains encoder and head for up to `cfg.epochs` epochs with layer-wise
/// rates on a cosine schedule, stopping once validation loss has not
/// improved for `early_stop_patience` epochs.
pub fn finetune(
    model: &Femba,
    store: &mut ParamStore<f32>,
    train: &[(Tensor<f32>, Label)],
    val: &[(Tensor<f32>, Label)],
    cfg: &TrainConfig,
    on_log: &mut dyn FnMut(&LogLine),
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Data("fine-tuning needs non-empty train and validation sets".into()));
    }
    for (_, l) in train.iter().chain(val) {
        check_arity(model, l)?;
    }
    for id in model.encoder_ids() {
        store.get_mut(id).requires_grad = !cfg.freeze_encoder;
    }
    let trainable_params = store.num_trainable();

    let ladder = layerwise_lrs(model.config.num_blocks, cfg.base_lr, cfg.layer_decay);
    let lr_of: Vec<f64> = store.iter().map(|(_, p)| ladder.for_name(&p.name)).collect();
    let batches = train.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * batches) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(store, cfg.adam);
    let mut log = Vec::new();
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best = store.clone();
    let mut step = 0u64;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let factor = cosine_lr(step, total, 1.0);
            lr = cfg.base_lr * factor;
            let (loss, grads) = batch_mean(chunk, store.len(), |i| sample_loss(model, store, &train[i].0, &train[i].1))?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { step, loss });
            }
            epoch_loss += loss * chunk.len() as f64;
            set_grads(store, &grads)?;
            adam_step(store, &mut adam, |id| lr_of[id.index()] * factor)?;
            step += 1;
        }
        epochs_run = epoch;
        let line = LogLine {
            step,
            split: Split::Train,
            loss: epoch_loss / train.len() as f64,
            lr,
        };
        on_log(&line);
        log.push(line);

        let v = evaluate(model, store, val)?.loss;
        let line = LogLine {
            step,
            split: Split::Val,
            loss: v,
            lr,
        };
        on_log(&line);
        log.push(line);
        let (improved, stop) = stopper.observe(epoch, v);
        if improved {
            best = store.clone();
        }
        if stop {
            stopped_early = true;
            break;
        }
    }
    store.zero_grad();
    Ok(FinetuneReport {
        log,
        epochs_run,
        stopped_early,
        best_epoch: stopper.best_epoch,
        best_val: stopper.best,
        best,
        trainable_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_one_stops_after_two_epochs() {
        let mut s = EarlyStopper::new(1);
        assert_eq!(s.observe(1, 1.0), (true, false));
        assert_eq!(s.observe(2, 1.5), (false, true));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn improvement_resets_the_count() {
        let mut s = EarlyStopper::new(2);
        s.observe(1, 1.0);
        assert_eq!(s.observe(2, 1.1), (false, false));
        assert_eq!(s.observe(3, 0.9), (true, false));
        assert_eq!(s.observe(4, 0.95), (false, false));
        assert_eq!(s.observe(5, 0.95), (false, true));
    }
}
