//! Checkpoint files: `"IPDF"`, version byte, u32 metadata length, JSON
//! metadata, then every weight as little-endian f32 in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ImplicitDensityModel, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::rotation::RotationFormat;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IPDF";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub descriptor_dim: usize,
    pub m: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub seed: u64,
    pub step: u64,
    #[serde(default)]
    pub pe_include_raw: bool,
    #[serde(default)]
    pub rotation_format: RotationFormat,
    /// Free-form record of the run that produced the weights.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl CheckpointMeta {
    pub fn for_model(model: &ImplicitDensityModel, step: u64) -> Self {
        let c = model.config();
        Self {
            descriptor_dim: c.descriptor_dim,
            m: c.pe_frequencies,
            hidden_width: c.hidden_width,
            hidden_layers: c.hidden_layers,
            seed: c.seed,
            step,
            pe_include_raw: c.pe_include_raw,
            rotation_format: c.rotation_format,
            extra: serde_json::Value::Null,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            descriptor_dim: self.descriptor_dim,
            pe_frequencies: self.m,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            seed: self.seed,
            pe_include_raw: self.pe_include_raw,
            rotation_format: self.rotation_format,
        }
    }
}

pub fn checkpoint_bytes(model: &ImplicitDensityModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let params = model.params();
    let mut out = Vec::with_capacity(9 + json.len() + 4 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for &v in t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    model: &ImplicitDensityModel,
    meta: &CheckpointMeta,
) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, meta)?)?;
    Ok(())
}

pub fn parse_checkpoint(path: &Path, bytes: &[u8]) -> Result<(ImplicitDensityModel, CheckpointMeta)> {
    if bytes.len() < 9 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {}", bytes[4])));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body = &bytes[9..];
    if body.len() < len {
        return Err(Error::format(path, "truncated metadata"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::format(path, format!("bad metadata: {e}")))?;
    let config = meta.model_config();
    config.validate()?;
    let mut params = Parameters::zeros(&config);
    let weights = &body[len..];
    if weights.len() != 4 * params.len() {
        return Err(Error::format(
            path,
            format!("expected {} weight bytes, found {}", 4 * params.len(), weights.len()),
        ));
    }
    let mut chunks = weights.chunks_exact(4);
    for t in params.tensors_mut() {
        for (v, c) in t.iter_mut().zip(&mut chunks) {
            *v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        }
    }
    let model = ImplicitDensityModel::from_parameters(config, params)?;
    Ok((model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(ImplicitDensityModel, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    parse_checkpoint(path, &bytes)
}
