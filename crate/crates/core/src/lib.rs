//! Linear-time bidirectional selective state-space modeling for multichannel
//! EEG time series.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`graph`], [`params`], [`optim`]: dense tensors, tape-based
//!   reverse-mode gradients, parameter storage, Adam and the cosine schedule.
//! - [`ssm`]: ZOH discretization, the selective scan, Mamba and
//!   bidirectional Mamba blocks.
//! - [`model`]: patch tokenizer, masking, encoder stack, reconstruction
//!   decoder, classifier heads and checkpoints.
//! - [`data`]: normalization, windowing, synthetic recordings, labeling
//!   schemes and the EEGB container.
//! - [`train`]: losses, learning-rate ladders, pre-training, fine-tuning and
//!   evaluation metrics.
//! - [`profile`]: analytic parameter/FLOP/memory accounting and the
//!   sequence-length scaling benchmark.

pub mod data;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod profile;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use graph::{CostCounter, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{DType, Scalar, Tensor, TensorError};

/// Adam learning rate used for fine-tuning.
pub const DEFAULT_LR: f64 = 1e-4;
/// Layer-wise learning-rate decay factor.
pub const DEFAULT_LAYER_DECAY: f64 = 0.75;
/// Fraction of patch tokens masked during pre-training.
pub const DEFAULT_MASK_RATIO: f64 = 0.6;
/// SSM state size shared by every preset.
pub const DEFAULT_STATE_SIZE: usize = 80;
