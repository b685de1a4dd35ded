//! Event annotations and the downstream labeling schemes.
//!
//! Type ids `0..=12` are artifact types. Under `mcc` only `0..=4` are valid.
//! Ids `13..=15` are background events (slowing, seizure, complex background)
//! used by the `abnormal` and `slowing4` schemes; artifact schemes ignore them.

use serde::{Deserialize, Serialize};

use super::DataError;

pub const NUM_ARTIFACT_TYPES: usize = 13;
pub const NUM_MCC_TYPES: usize = 5;
pub const SLOWING: u8 = 13;
pub const SEIZURE: u8 = 14;
pub const COMPLEX_BACKGROUND: u8 = 15;
pub const MAX_TYPE_ID: u8 = COMPLEX_BACKGROUND;

/// One annotated event on one channel over samples `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub channel: usize,
    pub start: usize,
    pub end: usize,
    pub type_id: u8,
}

impl Annotation {
    pub fn is_artifact(&self) -> bool {
        (self.type_id as usize) < NUM_ARTIFACT_TYPES
    }

    /// Samples shared with `[start, end)`.
    pub fn overlap(&self, start: usize, end: usize) -> usize {
        self.end.min(end).saturating_sub(self.start.max(start))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Window-level: any artifact anywhere.
    Bc,
    /// Per channel row: multilabel over 13 artifact types.
    Mc,
    /// Per channel row: one of 13 types or none.
    Mmc,
    /// Window-level: one of 5 artifact types; mixed windows dropped.
    Mcc,
    /// Window-level: any background event.
    Abnormal,
    /// Window-level: normal, slowing, seizure or complex background.
    Slowing4,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Bc,
        Scheme::Mc,
        Scheme::Mmc,
        Scheme::Mcc,
        Scheme::Abnormal,
        Scheme::Slowing4,
    ];

    pub fn is_per_channel(self) -> bool {
        matches!(self, Scheme::Mc | Scheme::Mmc)
    }

    /// Scores per output row: classes for window-level schemes, types for
    /// per-channel ones.
    pub fn num_outputs(self) -> usize {
        match self {
            Scheme::Bc | Scheme::Abnormal => 2,
            Scheme::Mc | Scheme::Mmc => NUM_ARTIFACT_TYPES,
            Scheme::Mcc => NUM_MCC_TYPES,
            Scheme::Slowing4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Bc => "bc",
            Scheme::Mc => "mc",
            Scheme::Mmc => "mmc",
            Scheme::Mcc => "mcc",
            Scheme::Abnormal => "abnormal",
            Scheme::Slowing4 => "slowing4",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name() == s.to_ascii_lowercase())
            .ok_or_else(|| DataError::Parse(format!("unknown scheme {s:?}")))
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    /// Single class id.
    Class(usize),
    /// `rows × types` flags, row-major.
    MultiHot { rows: usize, types: usize, values: Vec<bool> },
    /// One id per channel row; `types` means none.
    RowClasses { types: usize, values: Vec<usize> },
}

impl Label {
    /// `rows × types` 0/1 targets for the per-channel schemes. `RowClasses`
    /// become one-hot rows with the none class all zero.
    pub fn binary_targets(&self) -> Option<(usize, usize, Vec<f64>)> {
        match self {
            Label::Class(_) => None,
            Label::MultiHot { rows, types, values } => Some((
                *rows,
                *types,
                values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )),
            Label::RowClasses { types, values } => {
                let mut t = vec![0.0; values.len() * types];
                for (r, &c) in values.iter().enumerate() {
                    if c < *types {
                        t[r * types + c] = 1.0;
                    }
                }
                Some((values.len(), *types, t))
            }
        }
    }

    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            _ => None,
        }
    }
}

/// Labels window `[start, start + len)` of a recording with `channels`
/// channels grouped into rows of `patch_c`. `Ok(None)` means the scheme
/// drops the window.
pub fn relabel(
    annotations: &[Annotation],
    start: usize,
    len: usize,
    channels: usize,
    patch_c: usize,
    scheme: Scheme,
) -> Result<Option<Label>, DataError> {
    let end = start + len;
    for a in annotations {
        let valid = match scheme {
            Scheme::Mcc if a.is_artifact() => (a.type_id as usize) < NUM_MCC_TYPES,
            _ => a.type_id <= MAX_TYPE_ID,
        };
        if !valid {
            return Err(DataError::UnknownType {
                type_id: a.type_id,
                scheme,
            });
        }
        if a.channel >= channels {
            return Err(DataError::Parse(format!(
                "annotation channel {} out of range for {channels} channels",
                a.channel
            )));
        }
    }
    let hits = annotations.iter().filter(|a| a.overlap(start, end) > 0);
    let artifacts: Vec<&Annotation> = hits.clone().filter(|a| a.is_artifact()).collect();
    let background: Vec<&Annotation> = hits.filter(|a| !a.is_artifact()).collect();
    let rows = channels.div_ceil(patch_c);

    let label = match scheme {
        Scheme::Bc => Label::Class(usize::from(!artifacts.is_empty())),
        Scheme::Abnormal => Label::Class(usize::from(!background.is_empty())),
        Scheme::Mc => {
            let mut values = vec![false; rows * NUM_ARTIFACT_TYPES];
            for a in &artifacts {
                values[(a.channel / patch_c) * NUM_ARTIFACT_TYPES + a.type_id as usize] = true;
            }
            Label::MultiHot {
                rows,
                types: NUM_ARTIFACT_TYPES,
                values,
            }
        }
        Scheme::Mmc => {
            let mut overlap = vec![0usize; rows * NUM_ARTIFACT_TYPES];
            for a in &artifacts {
                overlap[(a.channel / patch_c) * NUM_ARTIFACT_TYPES + a.type_id as usize] += a.overlap(start, end);
            }
            let values = overlap
                .chunks(NUM_ARTIFACT_TYPES)
                .map(|row| argmax_positive(row).unwrap_or(NUM_ARTIFACT_TYPES))
                .collect();
            Label::RowClasses {
                types: NUM_ARTIFACT_TYPES,
                values,
            }
        }
        Scheme::Mcc => {
            let mut types: Vec<u8> = artifacts.iter().map(|a| a.type_id).collect();
            types.sort_unstable();
            types.dedup();
            match types.as_slice() {
                [t] => Label::Class(*t as usize),
                _ => return Ok(None),
            }
        }
        Scheme::Slowing4 => {
            let mut overlap = [0usize; 3];
            for a in &background {
                overlap[(a.type_id - SLOWING) as usize] += a.overlap(start, end);
            }
            Label::Class(argmax_positive(&overlap).map_or(0, |i| i + 1))
        }
    };
    Ok(Some(label))
}

/// Index of the largest positive entry; ties go to the lowest index.
fn argmax_positive(v: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        if x > 0 && best.is_none_or(|b| x > v[b]) {
            best = Some(i);
        }
    }
    best
}
