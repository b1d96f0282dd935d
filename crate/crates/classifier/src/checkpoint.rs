//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header (config, training metadata, tensor table), the tensors as
//! little-endian `f64`, and a SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ClassifierError;
use crate::model::{Model, ModelConfig, Variant};
use crate::train::TrainingMeta;

pub const MAGIC: &[u8; 8] = b"PGCKPT\r\n";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub meta: Option<TrainingMeta>,
}

impl ModelCheckpoint {
    pub fn untrained(model: Model) -> Self {
        Self { model, meta: None }
    }

    pub fn config(&self) -> ModelConfig {
        self.model.config()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: Option<TrainingMeta>,
    tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> ClassifierError {
    ClassifierError::Checkpoint(msg.into())
}

pub fn to_bytes(ckpt: &ModelCheckpoint) -> Vec<u8> {
    let state = ckpt.model.state();
    let header = Header {
        config: ckpt.model.config(),
        meta: ckpt.meta.clone(),
        tensors: state
            .iter()
            .map(|(name, v)| TensorEntry {
                name: name.clone(),
                len: v.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let values: usize = state.iter().map(|(_, v)| v.len()).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + 12 + json.len() + values * 8 + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, v) in &state {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Parses and validates a checkpoint. With `expected` set, a checkpoint of a
/// different variant is rejected.
pub fn from_bytes(bytes: &[u8], expected: Option<Variant>) -> Result<ModelCheckpoint, ClassifierError> {
    let fixed = MAGIC.len() + 4 + 8;
    if bytes.len() < fixed + DIGEST_LEN {
        return Err(corrupt(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or corrupt file)"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|l| fixed.checked_add(l))
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&body[fixed..header_end])
        .map_err(|e| corrupt(format!("bad header: {e}")))?;
    if let Some(v) = expected {
        if header.config.variant != v {
            return Err(corrupt(format!(
                "checkpoint holds a {} model, expected {v}",
                header.config.variant
            )));
        }
    }

    let mut model = Model::new(header.config, 0);
    let layout = model.state();
    if layout.len() != header.tensors.len()
        || layout
            .iter()
            .zip(&header.tensors)
            .any(|((name, v), e)| *name != e.name || v.len() != e.len)
    {
        return Err(corrupt(format!(
            "tensor table does not match a {} {} model",
            header.config.variant, header.config.backbone_scale
        )));
    }
    let blob = &body[header_end..];
    let total: usize = header.tensors.iter().map(|e| e.len).sum();
    if blob.len() != total * 8 {
        return Err(corrupt(format!(
            "weight blob has {} bytes, expected {}",
            blob.len(),
            total * 8
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let tensors = header
        .tensors
        .iter()
        .map(|e| values.by_ref().take(e.len).collect())
        .collect();
    model.load_state(tensors)?;
    Ok(ModelCheckpoint {
        model,
        meta: header.meta,
    })
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<(), ClassifierError> {
    fs::write(path, to_bytes(ckpt)).map_err(|source| ClassifierError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path, expected: Option<Variant>) -> Result<ModelCheckpoint, ClassifierError> {
    let bytes = fs::read(path).map_err(|source| ClassifierError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes, expected)
}
