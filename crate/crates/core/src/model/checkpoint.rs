//! Checkpoint files: an 8-byte little-endian manifest length, a JSON
//! manifest (format tag, seed, config, config fingerprint, tensor index),
//! then every tensor's data as little-endian f32, concatenated in manifest
//! order. Saving is deterministic: identical parameters and config produce
//! byte-identical files.

use crate::error::{CoreError, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{init_params, ModelParams};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "refsr-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    /// Offset into the payload, in f32 elements.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    seed: u64,
    config: ModelConfig,
    fingerprint: String,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: parameters plus the config and seed they were
/// trained with.
#[derive(Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: ModelConfig,
    pub seed: u64,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, config: &ModelConfig, seed: u64) -> Result<()> {
    let named = params.named_tensors();
    let mut tensors = Vec::with_capacity(named.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0u64;
    for (name, t) in &named {
        let (b, c, h, w) = t.shape();
        let len = t.numel() as u64;
        tensors.push(TensorEntry { name: name.clone(), shape: [b, c, h, w], offset, len });
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += len;
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        seed,
        config: config.clone(),
        fingerprint: config.fingerprint(),
        tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(8 + manifest_json.len() + payload.len());
    bytes.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest_json);
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 8 {
        return Err(CoreError::Checkpoint("file shorter than the length header".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 8 + len {
        return Err(CoreError::Checkpoint(format!(
            "manifest truncated: header says {len} bytes, {} available",
            bytes.len() - 8
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + len])
        .map_err(|e| CoreError::Checkpoint(format!("manifest is not valid JSON: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(CoreError::Checkpoint(format!(
            "unsupported format {:?}, expected {CHECKPOINT_FORMAT:?}",
            manifest.format
        )));
    }
    Ok((manifest, 8 + len))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let (manifest, payload_start) = read_manifest(&bytes)?;
    let recomputed = manifest.config.fingerprint();
    if recomputed != manifest.fingerprint {
        return Err(CoreError::FingerprintMismatch {
            file_fingerprint: manifest.fingerprint,
            config_fingerprint: recomputed,
        });
    }
    let payload = &bytes[payload_start..];
    let by_name: HashMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    if by_name.len() != manifest.tensors.len() {
        return Err(CoreError::Checkpoint("duplicate tensor names in manifest".into()));
    }

    let mut params = init_params(&manifest.config, manifest.seed);
    let mut consumed = 0usize;
    for (name, t) in params.named_tensors_mut() {
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| CoreError::Checkpoint(format!("tensor {name:?} missing from manifest")))?;
        let (b, c, h, w) = t.shape();
        if entry.shape != [b, c, h, w] || entry.len as usize != t.numel() {
            return Err(CoreError::Checkpoint(format!(
                "tensor {name:?} has shape {:?} in file, expected {:?}",
                entry.shape,
                [b, c, h, w]
            )));
        }
        let start = entry.offset as usize * 4;
        let end = start + entry.len as usize * 4;
        if end > payload.len() {
            return Err(CoreError::Checkpoint(format!(
                "payload truncated: tensor {name:?} needs bytes {start}..{end}, payload has {}",
                payload.len()
            )));
        }
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let at = start + i * 4;
            *v = f32::from_le_bytes(payload[at..at + 4].try_into().expect("4 bytes")) as f64;
        }
        consumed += 1;
    }
    if consumed != manifest.tensors.len() {
        return Err(CoreError::Checkpoint(format!(
            "manifest lists {} tensors, model uses {consumed}",
            manifest.tensors.len()
        )));
    }
    Ok(Checkpoint { params, config: manifest.config, seed: manifest.seed })
}

/// Load and require the stored config to match `expected` (by fingerprint).
pub fn load_checkpoint_with_config(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let file_fp = ckpt.config.fingerprint();
    let expect_fp = expected.fingerprint();
    if file_fp != expect_fp {
        return Err(CoreError::FingerprintMismatch {
            file_fingerprint: file_fp,
            config_fingerprint: expect_fp,
        });
    }
    Ok(ckpt)
}
