//! EEGB container, annotation sidecar and CSV import.
//!
//! EEGB layout, all little-endian: `"EEGB"`, version `u8 = 1`, channel count
//! `u16`, sample count `u64`, sample rate `f32`, subject-id length `u16` and
//! its UTF-8 bytes, then channel-major `f32` samples.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

use super::labels::Annotation;
use super::{DataError, EegRecording};

pub const EEGB_MAGIC: &[u8; 4] = b"EEGB";
pub const EEGB_VERSION: u8 = 1;

pub fn write_eegb<W: Write>(rec: &EegRecording, mut w: W) -> Result<(), DataError> {
    let c = u16::try_from(rec.channels()).map_err(|_| DataError::Format("more than 65535 channels".into()))?;
    let id = rec.subject_id.as_bytes();
    let id_len = u16::try_from(id.len()).map_err(|_| DataError::Format("subject id too long".into()))?;
    w.write_all(EEGB_MAGIC)?;
    w.write_all(&[EEGB_VERSION])?;
    w.write_all(&c.to_le_bytes())?;
    w.write_all(&(rec.len() as u64).to_le_bytes())?;
    w.write_all(&rec.sample_rate.to_le_bytes())?;
    w.write_all(&id_len.to_le_bytes())?;
    w.write_all(id)?;
    for v in rec.samples.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], DataError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| DataError::Format(format!("truncated EEGB header: {e}")))?;
    Ok(buf)
}

pub fn read_eegb<R: Read>(mut r: R) -> Result<EegRecording, DataError> {
    let magic: [u8; 4] = read_array(&mut r)?;
    if &magic != EEGB_MAGIC {
        return Err(DataError::Format(format!("bad magic {magic:?}, expected EEGB")));
    }
    let [version] = read_array::<1, _>(&mut r)?;
    if version != EEGB_VERSION {
        return Err(DataError::Format(format!("unsupported EEGB version {version}")));
    }
    let c = u16::from_le_bytes(read_array(&mut r)?) as usize;
    let n = u64::from_le_bytes(read_array(&mut r)?);
    let rate = f32::from_le_bytes(read_array(&mut r)?);
    let id_len = u16::from_le_bytes(read_array(&mut r)?) as usize;
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id)
        .map_err(|e| DataError::Format(format!("truncated subject id: {e}")))?;
    let id = String::from_utf8(id).map_err(|e| DataError::Format(format!("subject id is not UTF-8: {e}")))?;
    let n = usize::try_from(n).map_err(|_| DataError::Format("sample count overflows".into()))?;
    let total = c
        .checked_mul(n)
        .ok_or_else(|| DataError::Format("sample count overflows".into()))?;
    let mut bytes = vec![0u8; total * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| DataError::Format(format!("expected {total} samples: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    EegRecording::new(rate, id, Tensor::new(vec![c, n], data)?)
}

pub fn save_eegb(rec: &EegRecording, path: impl AsRef<Path>) -> Result<(), DataError> {
    write_eegb(rec, BufWriter::new(File::create(path)?))
}

pub fn load_eegb(path: impl AsRef<Path>) -> Result<EegRecording, DataError> {
    read_eegb(BufReader::new(File::open(path)?))
}

pub fn write_annotations<W: Write>(anns: &[Annotation], mut w: W) -> Result<(), DataError> {
    for a in anns {
        writeln!(w, "{},{},{},{}", a.channel, a.start, a.end, a.type_id)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `channel,start_sample,end_sample,type_id` lines. Blank lines and an
/// optional header line are skipped.
pub fn read_annotations<R: BufRead>(r: R) -> Result<Vec<Annotation>, DataError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("channel")) {
            continue;
        }
        let bad = |what: &str| DataError::Parse(format!("sidecar line {}: {what}: {line:?}", i + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [ch, s, e, t] = fields.as_slice() else {
            return Err(bad("expected 4 fields"));
        };
        let a = Annotation {
            channel: ch.parse().map_err(|_| bad("channel"))?,
            start: s.parse().map_err(|_| bad("start_sample"))?,
            end: e.parse().map_err(|_| bad("end_sample"))?,
            type_id: t.parse().map_err(|_| bad("type_id"))?,
        };
        if a.end <= a.start {
            return Err(bad("end_sample must exceed start_sample"));
        }
        out.push(a);
    }
    Ok(out)
}

pub fn save_annotations(anns: &[Annotation], path: impl AsRef<Path>) -> Result<(), DataError> {
    write_annotations(anns, BufWriter::new(File::create(path)?))
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>, DataError> {
    read_annotations(BufReader::new(File::open(path)?))
}

/// One row per sample, one column per channel. A non-numeric first row is
/// taken as a header.
pub fn read_csv<R: Read>(r: R, sample_rate: f32, subject_id: &str) -> Result<EegRecording, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Parse(format!("csv: {e}")))?;
        let parsed: Result<Vec<f32>, _> = rec.iter().map(str::parse::<f32>).collect();
        match parsed {
            Ok(v) => {
                if let Some(first) = rows.first() {
                    if first.len() != v.len() {
                        return Err(DataError::Parse(format!(
                            "csv row {} has {} columns, expected {}",
                            i + 1,
                            v.len(),
                            first.len()
                        )));
                    }
                }
                rows.push(v);
            }
            Err(_) if i == 0 => continue,
            Err(e) => return Err(DataError::Parse(format!("csv row {}: {e}", i + 1))),
        }
    }
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if n == 0 || c == 0 {
        return Err(DataError::Parse("csv has no samples".into()));
    }
    let mut data = vec![0.0f32; c * n];
    for (t, row) in rows.iter().enumerate() {
        for (ch, &v) in row.iter().enumerate() {
            data[ch * n + t] = v;
        }
    }
    EegRecording::new(sample_rate, subject_id, Tensor::new(vec![c, n], data)?)
}
