//! Versioned model checkpoints.
//!
//! Layout, little-endian: `"FMBA"`, version `u32`, config length `u32` and a
//! UTF-8 JSON config block, tensor count `u32`, then per tensor: name length
//! `u16` and UTF-8 name, rank `u8`, `rank × u64` dims, `f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Scheme;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

use super::{Femba, ModelConfig, ModelError, Parts, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMBA";
pub const CHECKPOINT_VERSION: u32 = 1;

/// The JSON config block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub decoder: bool,
    pub head: Option<Scheme>,
    /// Free-form provenance, e.g. the training step.
    #[serde(default)]
    pub note: String,
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &Femba, store: &ParamStore<T>, note: &str, mut w: W) -> Result<()> {
    let parts = model.parts();
    let meta = CheckpointMeta {
        model: model.config.clone(),
        decoder: parts.decoder,
        head: parts.head,
        note: note.to_string(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.value.rank() as u8])?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| ModelError::Checkpoint(format!("truncated {what}: {e}")))?;
    Ok(b)
}

fn take_vec<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)
        .map_err(|e| ModelError::Checkpoint(format!("truncated {what}: {e}")))?;
    Ok(b)
}

/// Rebuilds the model from the config block and fills every parameter from
/// the stored tensors. Names and shapes must match exactly.
pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<(Femba, ParamStore<T>, CheckpointMeta)> {
    let magic: [u8; 4] = take(&mut r, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!("bad magic {magic:?}, expected FMBA")));
    }
    let version = u32::from_le_bytes(take(&mut r, "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(take(&mut r, "config length")?) as usize;
    let json = take_vec(&mut r, len, "config block")?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(format!("config block: {e}")))?;

    let mut store = ParamStore::new();
    let parts = Parts {
        decoder: meta.decoder,
        head: meta.head,
    };
    let model = Femba::new(&meta.model, parts, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;

    let count = u32::from_le_bytes(take(&mut r, "tensor count")?) as usize;
    if count != store.len() {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint holds {count} tensors, model expects {}",
            store.len()
        )));
    }
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut r, "name length")?) as usize;
        let name = String::from_utf8(take_vec(&mut r, name_len, "name")?)
            .map_err(|e| ModelError::Checkpoint(format!("tensor name: {e}")))?;
        let [rank] = take::<1, _>(&mut r, "rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut r, "dims")?) as usize);
        }
        let id = store
            .id_of(&name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor {name}")))?;
        if store.value(id).shape() != shape.as_slice() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} has shape {shape:?}, model expects {:?}",
                store.value(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let bytes = take_vec(&mut r, n * 4, "tensor data")?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        store.get_mut(id).value = Tensor::new(shape, data)?;
    }
    Ok((model, store, meta))
}

pub fn save_checkpoint<T: Scalar>(model: &Femba, store: &ParamStore<T>, note: &str, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, store, note, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Femba, ParamStore<T>, CheckpointMeta)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupt_headers_rejected() {
        assert!(read_checkpoint::<f32, _>(&b"FMBB"[..]).is_err());
        let mut buf = b"FMBA".to_vec();
        buf.extend(2u32.to_le_bytes());
        assert!(read_checkpoint::<f32, _>(buf.as_slice()).is_err());
    }

    #[test]
    fn round_trip_values() {
        let cfg = ModelConfig::custom(1, 8, 4).with_input(4, 64);
        let mut store = ParamStore::<f32>::new();
        let m = Femba::new(&cfg, Parts::classifier(Scheme::Bc), &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &store, "step 3", &mut buf).unwrap();
        assert_eq!(&buf[..4], b"FMBA");
        let (m2, s2, meta) = read_checkpoint::<f32, _>(buf.as_slice()).unwrap();
        assert_eq!(meta.note, "step 3");
        assert_eq!(m2.parts(), m.parts());
        for ((_, a), (_, b)) in store.iter().zip(s2.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        buf.truncate(buf.len() - 1);
        assert!(read_checkpoint::<f32, _>(buf.as_slice()).is_err());
    }
}
