//! Binary checkpoints: magic, JSON header (config and tensor table), then
//! raw little-endian `f64` data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::SiamModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SIAMCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// In elements from the start of the data section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: Config,
    tensors: Vec<Entry>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        msg: msg.into(),
    }
}

pub fn to_bytes(model: &SiamModel) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        tensors.push(Entry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset,
        });
        offset += p.tensor.len();
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in model.store.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<SiamModel> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| format_err("truncated magic"))?;
    if &magic != MAGIC {
        return Err(format_err("bad magic"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| format_err("truncated header length"))?;
    let len = u64::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(format_err("truncated header"));
    }
    let header: Header = serde_json::from_slice(&r[..len]).map_err(|e| format_err(e.to_string()))?;
    let data = &r[len..];
    if !data.len().is_multiple_of(8) {
        return Err(format_err("data section not a whole number of f64"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut model = SiamModel::new(header.config, 0)?;
    if header.tensors.len() != model.store.len() {
        return Err(format_err(format!(
            "{} tensors stored, model has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    for entry in &header.tensors {
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| format_err(format!("unknown tensor `{}`", entry.name)))?;
        let slot = model.store.tensor_mut(id);
        if slot.shape() != entry.shape.as_slice() {
            return Err(format_err(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let end = entry.offset + slot.len();
        let chunk = values
            .get(entry.offset..end)
            .ok_or_else(|| format_err(format!("tensor `{}` out of range", entry.name)))?;
        *slot = Tensor::new(&entry.shape, chunk.to_vec())?;
    }
    Ok(model)
}

pub fn save(model: &SiamModel, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SiamModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
