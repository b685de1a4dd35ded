//! Reconstruction and classification losses.

use crate::data::Label;
use crate::graph::{Graph, Var};
use crate::model::MaskSet;
use crate::tensor::{Scalar, Tensor};

use super::{Result, TrainError};

/// `0.5·d²/β` inside `|d| < β`, `|d| − 0.5·β` outside.
pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

/// Mean Smooth-L1 over the masked rows of `(N × p·q)` predictions.
pub fn masked_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, mask: &MaskSet, beta: f64) -> Result<Var> {
    if mask.is_empty() {
        return Err(TrainError::EmptyMask);
    }
    let (_, cols) = target.dims2("masked_loss")?;
    let picked = g.gather_rows(pred, &mask.indices)?;
    let mut rows = Vec::with_capacity(mask.len() * cols);
    for &i in &mask.indices {
        rows.extend_from_slice(target.row(i));
    }
    let target = Tensor::new(vec![mask.len(), cols], rows)?;
    let l = g.smooth_l1(picked, &target, beta)?;
    Ok(g.mean(l))
}

/// Cross-entropy for class labels, mean sigmoid BCE for per-channel labels.
pub fn label_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, label: &Label) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    match label {
        Label::Class(c) => {
            if shape.len() != 2 || shape[0] != 1 || *c >= shape[1] {
                return Err(TrainError::Arity(format!(
                    "class label {c} does not fit logits of shape {shape:?}"
                )));
            }
            Ok(g.softmax_cross_entropy(logits, &[*c])?)
        }
        other => {
            let (rows, types, t) = other.binary_targets().expect("per-channel label");
            if shape != [rows, types] {
                return Err(TrainError::Arity(format!(
                    "({rows} × {types}) targets do not fit logits of shape {shape:?}"
                )));
            }
            let target = Tensor::from_f64(vec![rows, types], &t)?;
            let l = g.bce_with_logits(logits, &target)?;
            Ok(g.mean(l))
        }
    }
}
