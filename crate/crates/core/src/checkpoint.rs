//! Checkpoint files.
//!
//! Layout: the 8-byte magic `VTBRCKPT`, a little-endian `u64` manifest length,
//! the JSON manifest, then every parameter array as little-endian `f32`
//! values, row-major, in manifest order. The manifest carries the SHA-256 of
//! the array bytes, checked on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tape::{Mat, ParamGroup, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"VTBRCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the array section.
    pub offset: usize,
    pub group: ParamGroup,
    pub decay: bool,
}

/// Who wrote a checkpoint and from what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub step: usize,
    pub seed: u64,
    pub config_hash: String,
    pub model: ModelConfig,
    /// Stage-specific details, e.g. the number of training identities.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
    data_sha256: String,
}

pub fn encode_checkpoint(params: &ParamStore, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(params.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(params.len());
    for e in params.entries() {
        tensors.push(TensorEntry {
            name: e.name.clone(),
            shape: [e.value.nrows(), e.value.ncols()],
            offset: data.len(),
            group: e.group,
            decay: e.decay,
        });
        for v in e.value.iter() {
            data.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        meta: meta.clone(),
        tensors,
        data_sha256: hex::encode(Sha256::digest(&data)),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let corrupt = |reason: &str| Error::Corruption {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(corrupt("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len]).map_err(|e| corrupt(&e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Migration {
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let data = &body[len..];
    let expected: usize = manifest.tensors.iter().map(|t| t.shape[0] * t.shape[1] * 4).sum();
    if data.len() != expected {
        return Err(corrupt(&format!(
            "{} array bytes, manifest lists {expected}",
            data.len()
        )));
    }
    if hex::encode(Sha256::digest(data)) != manifest.data_sha256 {
        return Err(corrupt("array hash mismatch"));
    }
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let n = t.shape[0] * t.shape[1];
        let raw = data
            .get(t.offset..t.offset + n * 4)
            .ok_or_else(|| corrupt(&format!("tensor `{}` out of bounds", t.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let m = Mat::from_shape_vec((t.shape[0], t.shape[1]), values).map_err(|e| corrupt(&e.to_string()))?;
        store.add(t.name.clone(), m, t.group, t.decay);
    }
    Ok((store, manifest.meta))
}

pub fn save_checkpoint(params: &ParamStore, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
