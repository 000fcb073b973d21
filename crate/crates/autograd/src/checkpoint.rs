//! Versioned JSON parameter checkpoints: a map of name → {shape, row-major
//! f64 data}. Serialization uses shortest-round-trip float formatting, so a
//! save/load cycle reproduces every finite value bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("bad tensor in checkpoint: {0}")]
    Tensor(#[from] TensorError),
    #[error("checkpoint contains a non-finite value in {name}")]
    NonFinite { name: String },
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    params: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Default, Clone)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn to_json(ckpt: &Checkpoint) -> Result<String, CheckpointError> {
    let mut params = BTreeMap::new();
    for (name, tensor) in &ckpt.params {
        if !tensor.all_finite() {
            return Err(CheckpointError::NonFinite { name: name.clone() });
        }
        params.insert(
            name.clone(),
            TensorEntry {
                shape: tensor.shape().to_vec(),
                data: tensor.data().to_vec(),
            },
        );
    }
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        meta: ckpt.meta.clone(),
        params,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn from_json(text: &str) -> Result<Checkpoint, CheckpointError> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: file.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut params = Vec::with_capacity(file.params.len());
    for (name, entry) in file.params {
        params.push((name, Tensor::new(entry.shape, entry.data)?));
    }
    Ok(Checkpoint {
        meta: file.meta,
        params,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, to_json(ckpt)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_json(&fs::read_to_string(path)?)
}
