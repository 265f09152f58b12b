//! Binary checkpoint container.
//!
//! Layout (little-endian): `"VBCK"`, version `u32`, metadata length
//! `u32` + UTF-8 JSON, registry length `u32` + UTF-8 JSON, value count
//! `u64`, then `f32` parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layout::Registry;
use super::loss::LossWeights;
use super::net::{Model, ModelConfig};
use super::ModelError;
use crate::fsutil::atomic_write;
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"VBCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Feature frontend the model was trained on.
    pub frontend: String,
    /// Normalization statistics file applied to the inputs, if any.
    pub gmvn: Option<String>,
    pub loss_weights: LossWeights,
    pub train_steps: usize,
}

fn err(m: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(m.into())
}

pub fn encode_checkpoint<T: Real>(model: &Model<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    let reg_json = serde_json::to_vec(&model.registry).expect("registry serializes");
    let mut out = Vec::with_capacity(24 + meta_json.len() + reg_json.len() + 4 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for blob in [&meta_json, &reg_json] {
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(blob);
    }
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for v in &model.params {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], ModelError> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| err("truncated"))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(Model<T>, CheckpointMeta), ModelError> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let mut blob = || -> Result<&[u8], ModelError> {
        let n = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
        take(bytes, &mut pos, n)
    };
    let meta: CheckpointMeta = serde_json::from_slice(blob()?).map_err(|e| err(format!("metadata: {e}")))?;
    let registry: Registry = serde_json::from_slice(blob()?).map_err(|e| err(format!("registry: {e}")))?;
    let count = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap()) as usize;
    let payload = &bytes[pos..];
    if payload.len() != 4 * count || registry.len() != count || !registry.is_consistent() {
        return Err(err(format!(
            "registry covers {} values, header {count}, payload {} bytes",
            registry.len(),
            payload.len()
        )));
    }
    let mut model = Model::<T>::init(meta.model.clone())?;
    if model.registry != registry {
        return Err(err("stored registry does not match the stored config"));
    }
    for (p, c) in model.params.iter_mut().zip(payload.chunks_exact(4)) {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(ModelError::NonFinite {
                tensor: "checkpoint payload".into(),
            });
        }
        *p = T::lit(v as f64);
    }
    Ok((model, meta))
}

pub fn write_checkpoint<T: Real>(path: &Path, model: &Model<T>, meta: &CheckpointMeta) -> Result<(), ModelError> {
    atomic_write(path, &encode_checkpoint(model, meta))?;
    Ok(())
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<(Model<T>, CheckpointMeta), ModelError> {
    decode_checkpoint(&std::fs::read(path)?)
}
