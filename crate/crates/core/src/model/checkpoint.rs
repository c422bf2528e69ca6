//! Checkpoint container.
//!
//! Layout: an 8-byte little-endian unsigned header length `N`, then `N`
//! bytes of UTF-8 JSON `{format_version: 1, config: {..}, tensors: [{name,
//! dtype: "f32", shape, byte_offset, byte_length}, ..]}`, then a raw
//! little-endian float32 payload. Tensors are row-major, contiguous, in
//! header order; `byte_offset` is measured from the start of the payload.
//!
//! Optimizer sidecars written by the training loop reuse the same
//! container with an extra `train_state` JSON field, which plain model
//! readers may ignore.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParameterStore, TensorData};
use super::{Model, ModelConfig, ModelError};
use crate::Elem;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_state: Option<serde_json::Value>,
}

/// Writes a tensor store (with optional training-state metadata) to `path`.
pub fn save_store(
    path: &Path,
    config: &ModelConfig,
    store: &ParameterStore,
    train_state: Option<serde_json::Value>,
) -> Result<(), ModelError> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, tensor) in store.iter() {
        let byte_length = (tensor.data.len() * 4) as u64;
        tensors.push(TensorMeta {
            name: name.to_string(),
            dtype: "f32".to_string(),
            shape: tensor.shape.clone(),
            byte_offset: offset,
            byte_length,
        });
        offset += byte_length;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        tensors,
        train_state,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| ModelError::CorruptCheckpoint {
        reason: format!("header serialization failed: {e}"),
    })?;

    let mut file = fs::File::create(path)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    let mut payload = Vec::with_capacity(offset as usize);
    for (_, tensor) in store.iter() {
        for v in &tensor.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&payload)?;
    Ok(())
}

/// Reads a tensor store written by [`save_store`] (or any conforming
/// writer), validating the layout strictly.
pub fn load_store(
    path: &Path,
) -> Result<(ModelConfig, ParameterStore, Option<serde_json::Value>), ModelError> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let corrupt = |reason: String| ModelError::CorruptCheckpoint { reason };

    if bytes.len() < 8 {
        return Err(corrupt("file shorter than the 8-byte length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if header_len > (bytes.len() - 8) as u64 {
        return Err(corrupt(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header_len = header_len as usize;
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| corrupt(format!("header JSON: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }

    let payload = &bytes[8 + header_len..];
    let mut store = ParameterStore::new();
    let mut expected_offset = 0u64;
    for meta in &header.tensors {
        if meta.dtype != "f32" {
            return Err(corrupt(format!(
                "tensor '{}' has dtype '{}', only f32 is defined",
                meta.name, meta.dtype
            )));
        }
        let count: usize = meta.shape.iter().product();
        if meta.byte_length != (count * 4) as u64 {
            return Err(corrupt(format!(
                "tensor '{}' shape {:?} disagrees with byte_length {}",
                meta.name, meta.shape, meta.byte_length
            )));
        }
        if meta.byte_offset != expected_offset {
            return Err(corrupt(format!(
                "tensor '{}' is not contiguous (offset {}, expected {expected_offset})",
                meta.name, meta.byte_offset
            )));
        }
        expected_offset += meta.byte_length;
        let start = meta.byte_offset as usize;
        let end = start + meta.byte_length as usize;
        if end > payload.len() {
            return Err(corrupt(format!(
                "tensor '{}' extends past the end of the payload",
                meta.name
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store
            .insert(meta.name.clone(), TensorData { shape: meta.shape.clone(), data })
            .map_err(|e| corrupt(e.to_string()))?;
    }
    if payload.len() as u64 != expected_offset {
        return Err(corrupt(format!(
            "payload holds {} bytes, header describes {expected_offset}",
            payload.len()
        )));
    }
    Ok((header.config, store, header.train_state))
}

/// Serializes config plus every parameter and buffer of `model`.
pub fn save_checkpoint<T: Elem>(model: &Model<T>, path: &Path) -> Result<(), ModelError> {
    save_store(path, &model.config, &model.state_dict(), None)
}

/// Reads back a checkpoint's config and tensors.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParameterStore), ModelError> {
    let (config, store, _) = load_store(path)?;
    Ok((config, store))
}

/// Convenience: rebuilds the model a checkpoint describes and loads its
/// state.
pub fn model_from_checkpoint<T: Elem>(path: &Path) -> Result<Model<T>, ModelError> {
    let (config, store) = load_checkpoint(path)?;
    let mut model = Model::new(config)?;
    model.load_state_dict(&store)?;
    Ok(model)
}
