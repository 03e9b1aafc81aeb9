//! Checkpoint files: one line of JSON header, a `\n`, then the raw parameter
//! values as little-endian `f32`. The header lists every tensor's name, shape
//! and byte offset into the data section, and may carry an opaque config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "agseg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(params: &ParamStore, config: Option<serde_json::Value>) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len() * 4;
    }
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        version: VERSION,
        config,
        tensors,
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(offset);
    for (_, t) in params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, CheckpointHeader)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let data = &bytes[split + 1..];
    let mut params = ParamStore::new();
    let mut expected_end = 0;
    for entry in &header.tensors {
        let end = entry.offset + entry.len * 4;
        if end > data.len() || entry.shape.iter().product::<usize>() != entry.len {
            return Err(Error::Checkpoint(format!("tensor `{}` is truncated or misdescribed", entry.name)));
        }
        let values = data[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?)?;
        expected_end = expected_end.max(end);
    }
    if expected_end != data.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            data.len() - expected_end
        )));
    }
    Ok((params, header))
}

pub fn save(path: &Path, params: &ParamStore, config: Option<serde_json::Value>) -> Result<()> {
    let bytes = encode(params, config)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(path.display().to_string()))
}
