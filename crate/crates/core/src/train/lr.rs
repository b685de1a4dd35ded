//! Layer-wise learning-rate decay.

use serde::Serialize;

/// Per-group learning rates for a model with `blocks.len()` encoder blocks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerLrs {
    /// `base·decay^(L−k)` for block `k`, earliest first.
    pub blocks: Vec<f64>,
    /// Head, decoder and the final encoder norm.
    pub head: f64,
    /// Patch projection and positional embeddings: `base·decay^(L+1)`.
    pub tokenizer: f64,
}

pub fn layerwise_lrs(num_blocks: usize, base_lr: f64, decay: f64) -> LayerLrs {
    let l = num_blocks as i32;
    LayerLrs {
        blocks: (0..l).map(|k| base_lr * decay.powi(l - k)).collect(),
        head: base_lr,
        tokenizer: base_lr * decay.powi(l + 1),
    }
}

impl LayerLrs {
    /// Uniform rate for every group.
    pub fn uniform(num_blocks: usize, lr: f64) -> Self {
        layerwise_lrs(num_blocks, lr, 1.0)
    }

    /// Rate for a parameter by its hierarchical name.
    pub fn for_name(&self, name: &str) -> f64 {
        if name.starts_with("tokenizer.") {
            return self.tokenizer;
        }
        if let Some(rest) = name.strip_prefix("encoder.blocks.") {
            if let Some(k) = rest.split('.').next().and_then(|k| k.parse::<usize>().ok()) {
                if let Some(&lr) = self.blocks.get(k) {
                    return lr;
                }
            }
        }
        self.head
    }

    /// Every rate multiplied by `factor` (used for the schedule).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            blocks: self.blocks.iter().map(|v| v * factor).collect(),
            head: self.head * factor,
            tokenizer: self.tokenizer * factor,
        }
    }
}
