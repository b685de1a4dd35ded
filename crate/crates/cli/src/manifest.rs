//! Run provenance written before any artifact.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config: &'a RunConfig,
    pub seed: u64,
    /// Content hash over every input file; see [`input_hash`].
    pub input_hash: String,
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    pub version: &'static str,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of `"blob {len}\0"` followed by the content.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()));
    h.update(content);
    hex(&h.finalize())
}

/// SHA-256 over `"{name}\0{blob hash}\n"` for every input, sorted by name.
/// Names are file names, so moving an input directory keeps the hash.
pub fn input_hash(files: &[PathBuf]) -> Result<String> {
    let mut entries = Vec::with_capacity(files.len());
    for f in files {
        let content = std::fs::read(f).with_context(|| format!("reading {}", f.display()))?;
        let name = f.file_name().map_or_else(|| f.display().to_string(), |n| n.to_string_lossy().into_owned());
        entries.push((name, blob_hash(&content)));
    }
    entries.sort();
    let mut h = Sha256::new();
    for (name, blob) in &entries {
        h.update(format!("{name}\0{blob}\n"));
    }
    Ok(hex(&h.finalize()))
}

impl Manifest<'_> {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_of_empty_content() {
        // sha256 of "blob 0\0"
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn input_hash_ignores_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.eegb");
        let b = dir.path().join("b.eegb");
        std::fs::write(&a, b"one").unwrap();
        std::fs::write(&b, b"two").unwrap();
        let h1 = input_hash(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(h1, input_hash(&[b.clone(), a]).unwrap());
        std::fs::write(&b, b"three").unwrap();
        assert_ne!(h1, input_hash(&[b]).unwrap());
    }
}
