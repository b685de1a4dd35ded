//! Per-channel IQR normalization and windowing.

use crate::tensor::{Scalar, Tensor};

use super::{DataError, EegRecording, EegWindow};

pub const IQR_EPS: f64 = 1e-8;

/// Percentile `p ∈ [0, 1]` of sorted data by linear interpolation between
/// order statistics.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// `(x − q25) / ((q75 − q25) + 1e-8)` per channel of a `(C × T)` tensor.
pub fn quartile_normalize<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, DataError> {
    let (c, t) = x.dims2("quartile_normalize")?;
    if t < 4 {
        return Err(DataError::Format(format!(
            "normalization needs at least 4 samples per channel, got {t}"
        )));
    }
    let mut out = Vec::with_capacity(c * t);
    let mut sorted = vec![0.0; t];
    for ch in 0..c {
        let row = x.row(ch);
        for (s, v) in sorted.iter_mut().zip(row) {
            *s = v.as_f64();
        }
        sorted.sort_by(f64::total_cmp);
        let q_lo = percentile_sorted(&sorted, 0.25);
        let q_hi = percentile_sorted(&sorted, 0.75);
        if q_hi == q_lo {
            log::warn!("channel {ch} has zero interquartile range; dividing by {IQR_EPS}");
        }
        let denom = (q_hi - q_lo) + IQR_EPS;
        out.extend(row.iter().map(|v| T::lit((v.as_f64() - q_lo) / denom)));
    }
    Ok(Tensor::new(vec![c, t], out)?)
}

/// Left-aligned windows of `win` samples every `stride` samples; a trailing
/// partial window is dropped. Windows are cut raw, without normalization.
pub fn window(recording: &EegRecording, win: usize, stride: usize) -> Vec<EegWindow> {
    let total = recording.len();
    if win == 0 || win > total {
        log::warn!("window length {win} does not fit a recording of {total} samples");
        return Vec::new();
    }
    let stride = if stride == 0 { win } else { stride };
    let c = recording.channels();
    (0..=total - win)
        .step_by(stride)
        .map(|start| {
            let mut data = Vec::with_capacity(c * win);
            for ch in 0..c {
                data.extend_from_slice(&recording.channel(ch)[start..start + win]);
            }
            EegWindow {
                data: Tensor::new(vec![c, win], data).expect("window shape"),
                subject_id: recording.subject_id.clone(),
                start,
                label: None,
            }
        })
        .collect()
}
