//! Input discovery and windowing for the commands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use femba::data::{io, labeled_windows, split_indices, Annotation, EegRecording, EegWindow, Scheme};
use log::info;

use crate::config::RunConfig;

/// The `.eegb` and `.csv` files under `path` (sorted), or `path` itself.
pub fn input_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        bail!("data path {} does not exist", path.display());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("eegb" | "csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .eegb or .csv recordings in {}", path.display());
    }
    Ok(files)
}

/// Sidecar annotation file of a recording.
pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("ann")
}

/// Loads one recording and its sidecar annotations (empty when absent).
pub fn load_recording(path: &Path, cfg: &RunConfig) -> Result<(EegRecording, Vec<Annotation>)> {
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let rec = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            io::read_csv(f, cfg.data.csv_sample_rate, &stem)?
        }
        _ => io::load_eegb(path).with_context(|| format!("reading {}", path.display()))?,
    };
    let ann = sidecar(path);
    let anns = if ann.is_file() {
        io::load_annotations(&ann).with_context(|| format!("reading {}", ann.display()))?
    } else {
        Vec::new()
    };
    Ok((rec, anns))
}

/// Every window of every input file, in file order.
pub fn windows(files: &[PathBuf], cfg: &RunConfig, scheme: Option<Scheme>) -> Result<Vec<EegWindow>> {
    let m = &cfg.model;
    let mut out = Vec::new();
    for f in files {
        let (rec, anns) = load_recording(f, cfg)?;
        if rec.channels() != m.channels {
            bail!(
                "{} has {} channels but model.channels is {}",
                f.display(),
                rec.channels(),
                m.channels
            );
        }
        let w = labeled_windows(&rec, &anns, m.samples, cfg.stride(), m.patch_c, scheme)
            .with_context(|| format!("windowing {}", f.display()))?;
        info!("{}: {} windows", f.display(), w.len());
        out.extend(w);
    }
    if out.is_empty() {
        bail!("no windows of {} samples in the inputs", m.samples);
    }
    Ok(out)
}

/// Windows split 80/10/10 by the run seed.
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

pub fn split<T: Clone>(items: &[T], seed: u64) -> Result<Splits<T>> {
    let s = split_indices(items.len(), seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    let out = Splits {
        train: pick(&s.train),
        val: pick(&s.val),
        test: pick(&s.test),
    };
    if out.train.is_empty() || out.val.is_empty() {
        bail!(
            "{} windows leave an empty train or validation split; supply more data or a smaller data.stride",
            items.len()
        );
    }
    Ok(out)
}
