//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TMPLCKPT"            8-byte magic
//! u32                    format version (1)
//! u64                    header length in bytes
//! header                 UTF-8 JSON: {config, step, averaged_steps, tensors: [{name, shape}]}
//! f64 * N                parameter data, tensors in header order, row-major
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load cycle is bitwise
//! exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TMPLCKPT";
const VERSION: u32 = 1;

/// A model snapshot tagged with the training step it was taken at.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub model: TransformerModel,
    /// Steps of the snapshots that were averaged into this one, if any.
    pub averaged_steps: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: usize,
    #[serde(default)]
    averaged_steps: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = Header {
        config: ckpt.model.config().clone(),
        step: ckpt.step,
        averaged_steps: ckpt.averaged_steps.clone(),
        tensors: ckpt
            .model
            .parameters()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let numel: usize = ckpt.model.parameters().map(|(_, t)| t.numel()).sum();
    let mut buf = Vec::with_capacity(20 + header.len() + 8 * numel);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in ckpt.model.parameters() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::format(path, reason);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body_start = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..body_start]).map_err(|e| bad(&format!("header: {e}")))?;
    let mut offset = body_start;
    let mut params = BTreeMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + 8 * n;
        if end > bytes.len() {
            return Err(bad("truncated tensor data"));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset = end;
        let t = Tensor::new(entry.shape, data).map_err(|e| bad(&e.to_string()))?;
        params.insert(entry.name, t);
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let model = TransformerModel::from_parameters(&header.config, params)
        .map_err(|e| bad(&e.to_string()))?;
    Ok(Checkpoint {
        step: header.step,
        model,
        averaged_steps: header.averaged_steps,
    })
}
