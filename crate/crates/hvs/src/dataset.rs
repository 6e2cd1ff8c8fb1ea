//! Labeled dataset files and split files.
//!
//! Dataset layout, all little-endian:
//!
//! ```text
//! "HVSD" | version u32 | rows u32 | dim u32 | classes u32 | f32 features (row-major) | u32 labels
//! ```
//!
//! A split file is JSON holding the split configuration and the row indices
//! of every part. Loading recomputes the split from the configuration and
//! checks the indices match, so a split file cannot silently drift from the
//! dataset it was made for.

use std::fs;
use std::path::Path;

use hvs_core::data::{make_open_set_split, LabeledDataset, OpenSetSplit, SplitConfig, SplitIndices};
use hvs_core::Tensor2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::read_header;
use crate::error::{format_err, HvsError, Result};

pub const MAGIC: &[u8; 4] = b"HVSD";
pub const DATASET_VERSION: u32 = 1;

pub fn encode(d: &LabeledDataset) -> Result<Vec<u8>> {
    let missing = d.missing_classes();
    if !missing.is_empty() {
        return Err(HvsError::Config(format!("classes without samples: {missing:?}")));
    }
    let mut out = Vec::with_capacity(24 + d.len() * (d.dim() + 1) * 4);
    out.extend_from_slice(MAGIC);
    for v in [DATASET_VERSION, d.len() as u32, d.dim() as u32, d.class_count() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in d.features().as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in d.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<LabeledDataset> {
    let pos = read_header(bytes, MAGIC, DATASET_VERSION)?;
    let word = |i: usize| -> Result<u32> {
        let s = bytes.get(pos + 4 * i..pos + 4 * i + 4).ok_or_else(|| format_err("truncated dataset header"))?;
        Ok(u32::from_le_bytes(s.try_into().unwrap()))
    };
    let (rows, dim, classes) = (word(0)? as usize, word(1)? as usize, word(2)? as usize);
    let body = &bytes[pos + 12..];
    let expected = rows.checked_mul(dim + 1).and_then(|n| n.checked_mul(4)).ok_or_else(|| format_err("dataset too large"))?;
    if body.len() != expected {
        return Err(format_err(format!("dataset body has {} bytes, expected {expected}", body.len())));
    }
    let (f, l) = body.split_at(rows * dim * 4);
    let features = f.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let labels = l.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(LabeledDataset::new(Tensor2::new(rows, dim, features)?, labels, classes)?)
}

pub fn save_dataset(path: &Path, d: &LabeledDataset) -> Result<()> {
    fs::write(path, encode(d)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    decode(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub config: SplitConfig,
    pub indices: SplitIndices,
}

pub fn save_split(path: &Path, split: &OpenSetSplit, config: &SplitConfig) -> Result<()> {
    let f = SplitFile { config: config.clone(), indices: split.indices.clone() };
    fs::write(path, serde_json::to_string_pretty(&f)? + "\n")?;
    Ok(())
}

pub fn load_split(path: &Path, dataset: &LabeledDataset) -> Result<OpenSetSplit> {
    let f: SplitFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    let split = make_open_set_split(dataset, &f.config)?;
    if split.indices != f.indices {
        return Err(format_err("split indices do not match this dataset"));
    }
    Ok(split)
}
