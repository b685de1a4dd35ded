//! Recordings, preprocessing, synthetic data, labeling schemes and file formats.

pub mod io;
pub mod labels;
pub mod prep;
pub mod split;
pub mod synth;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub use labels::{relabel, Annotation, Label, Scheme};
pub use prep::{quartile_normalize, window};
pub use split::{split_indices, DatasetSplit};
pub use synth::{synth_generate, SynthSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error("type id {type_id} is not valid under scheme {scheme}")]
    UnknownType { type_id: u8, scheme: Scheme },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A multichannel recording, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EegRecording {
    pub sample_rate: f32,
    pub subject_id: String,
    /// `(C × total_T)`.
    pub samples: Tensor<f32>,
}

impl EegRecording {
    pub fn new(sample_rate: f32, subject_id: impl Into<String>, samples: Tensor<f32>) -> Result<Self, DataError> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(DataError::Format(format!("sample rate must be positive, got {sample_rate}")));
        }
        samples.dims2("recording")?;
        Ok(Self {
            sample_rate,
            subject_id: subject_id.into(),
            samples,
        })
    }

    pub fn channels(&self) -> usize {
        self.samples.dim(0)
    }

    pub fn len(&self) -> usize {
        self.samples.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        self.samples.row(c)
    }
}

/// One `(C × T)` window cut from a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct EegWindow {
    pub data: Tensor<f32>,
    pub subject_id: String,
    /// First sample in the source recording.
    pub start: usize,
    pub label: Option<Label>,
}

impl EegWindow {
    pub fn channels(&self) -> usize {
        self.data.dim(0)
    }

    pub fn len(&self) -> usize {
        self.data.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Windows `recording` with `win`/`stride`, normalizes each window and
/// labels it under `scheme`. Windows the scheme drops are skipped.
pub fn labeled_windows(
    recording: &EegRecording,
    annotations: &[Annotation],
    win: usize,
    stride: usize,
    patch_c: usize,
    scheme: Option<Scheme>,
) -> Result<Vec<EegWindow>, DataError> {
    let mut out = Vec::new();
    for mut w in window(recording, win, stride) {
        w.data = quartile_normalize(&w.data)?;
        if let Some(s) = scheme {
            match relabel(annotations, w.start, win, recording.channels(), patch_c, s)? {
                Some(l) => w.label = Some(l),
                None => continue,
            }
        }
        out.push(w);
    }
    Ok(out)
}
