//! Binary checkpoint: `LAVO` magic, u32 LE version, u64 LE header length,
//! JSON header, then row-major little-endian f32 tensors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use lavo::tensor::Tensor2D;

use crate::config::LmConfig;
use crate::model::LmModel;
use crate::{LmError, Result};

pub const MAGIC: &[u8; 4] = b"LAVO";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: LmConfig,
    /// name -> (rows, cols, byte offset into the payload)
    tensors: BTreeMap<String, (usize, usize, usize)>,
}

/// Encodes every parameter, rounded to 32-bit floats.
pub fn to_bytes(model: &LmModel) -> Result<Vec<u8>> {
    let store = model.store();
    let mut tensors = BTreeMap::new();
    let mut payload = Vec::new();
    for id in store.ids() {
        let v = store.value(id);
        tensors.insert(store.name(id).to_string(), (v.rows(), v.cols(), payload.len()));
        for &x in v.data() {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header { config: model.config().clone(), tensors })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<LmModel> {
    let corrupt = |why: &str| LmError::CorruptCheckpoint(why.to_string());
    if bytes.len() < 4 {
        return Err(corrupt("file ends inside the magic bytes"));
    }
    if &bytes[..4] != MAGIC {
        return Err(LmError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(corrupt("file ends inside the fixed header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(LmError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("file ends inside the JSON header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| corrupt(&format!("bad JSON header: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut model = LmModel::init(&header.config)?;
    let store = model.store_mut();
    let ids: Vec<_> = store.ids().collect();
    if ids.len() != header.tensors.len() {
        return Err(corrupt("tensor index does not match the model layout"));
    }
    let mut expected = 0usize;
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(ids.len());
    for id in ids {
        let name = store.name(id).to_string();
        let &(rows, cols, offset) = header.tensors.get(&name).ok_or_else(|| corrupt(&format!("missing tensor {name}")))?;
        if (rows, cols) != store.value(id).shape() {
            return Err(corrupt(&format!("tensor {name} has shape {rows}x{cols}")));
        }
        let end = offset + rows * cols * 4;
        if end > payload.len() {
            return Err(corrupt(&format!("payload truncated inside tensor {name}")));
        }
        spans.push((offset, end));
        expected += rows * cols * 4;
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        store.set_value(id, Tensor2D::new(rows, cols, data)?)?;
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[0].1 > w[1].0) {
        return Err(corrupt("tensor payloads overlap"));
    }
    if payload.len() != expected {
        return Err(corrupt(&format!("payload has {} bytes, index describes {expected}", payload.len())));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &LmModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|source| LmError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<LmModel> {
    from_bytes(&std::fs::read(path).map_err(|source| LmError::Io { path: path.to_path_buf(), source })?)
}
