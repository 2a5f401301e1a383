use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest is not valid JSON: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("manifest and blob disagree: {0}")]
    Inconsistent(String),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub key: String,
    /// Byte offset into the blob.
    pub offset: usize,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub params: Vec<TensorEntry>,
    pub optimizer: Vec<TensorEntry>,
    pub blob_bytes: usize,
    pub state: serde_json::Value,
}

/// Parameters plus optional optimizer tensors and free-form training state
/// (epoch, sampler position, metrics).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Vec<(String, Tensor)>,
    pub state: serde_json::Value,
}

impl Checkpoint {
    pub fn param(&self, key: &str) -> Option<&Tensor> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, t)| t)
    }

    /// Serializes all tensors as little-endian `f64` and builds the manifest.
    pub fn encode(&self) -> (Manifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut entries = |list: &[(String, Tensor)]| -> Vec<TensorEntry> {
            list.iter()
                .map(|(key, t)| {
                    let offset = blob.len();
                    for v in t.data() {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                    TensorEntry {
                        key: key.clone(),
                        offset,
                        shape: t.shape().to_vec(),
                        dtype: if t.is_complex() { "complex128" } else { "real64" }.into(),
                    }
                })
                .collect()
        };
        let params = entries(&self.params);
        let optimizer = entries(&self.optimizer);
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            params,
            optimizer,
            blob_bytes: blob.len(),
            state: self.state.clone(),
        };
        (manifest, blob)
    }

    /// Rebuilds the tensors whose keys satisfy `keep`.
    pub fn decode(manifest: &Manifest, blob: &[u8], keep: impl Fn(&str) -> bool) -> Result<Self, CheckpointError> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(manifest.format_version));
        }
        if blob.len() != manifest.blob_bytes {
            return Err(CheckpointError::Inconsistent(format!(
                "manifest declares {} blob bytes, blob has {}",
                manifest.blob_bytes,
                blob.len()
            )));
        }
        let read = |entries: &[TensorEntry]| -> Result<Vec<(String, Tensor)>, CheckpointError> {
            let mut out = Vec::new();
            for e in entries.iter().filter(|e| keep(&e.key)) {
                let complex = match e.dtype.as_str() {
                    "real64" => false,
                    "complex128" => true,
                    other => {
                        return Err(CheckpointError::Inconsistent(format!(
                            "tensor `{}` has dtype {other}",
                            e.key
                        )))
                    }
                };
                let count = crate::tensor::numel(&e.shape) * if complex { 2 } else { 1 };
                let end = e.offset + 8 * count;
                if end > blob.len() {
                    return Err(CheckpointError::Inconsistent(format!(
                        "tensor `{}` spans bytes {}..{end}, blob has {}",
                        e.key,
                        e.offset,
                        blob.len()
                    )));
                }
                let data = blob[e.offset..end]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                let t = if complex {
                    Tensor::complex(&e.shape, data)
                } else {
                    Tensor::new(&e.shape, data)
                }
                .map_err(|err| CheckpointError::Inconsistent(err.to_string()))?;
                out.push((e.key.clone(), t));
            }
            Ok(out)
        };
        Ok(Checkpoint {
            config: manifest.config.clone(),
            params: read(&manifest.params)?,
            optimizer: read(&manifest.optimizer)?,
            state: manifest.state.clone(),
        })
    }
}

/// Writes `dir/tensors.bin` and `dir/manifest.json`, each atomically.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let (manifest, blob) = ckpt.encode();
    super::atomic_write(&dir.join(BLOB), &blob)?;
    super::atomic_write(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    load_checkpoint_filtered(dir, |_| true)
}

/// Loads only the tensors whose keys satisfy `keep`.
pub fn load_checkpoint_filtered(
    dir: impl AsRef<Path>,
    keep: impl Fn(&str) -> bool,
) -> Result<Checkpoint, CheckpointError> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST))?)?;
    let blob = std::fs::read(dir.join(BLOB))?;
    Checkpoint::decode(&manifest, &blob, keep)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest, CheckpointError> {
    Ok(serde_json::from_slice(&std::fs::read(dir.as_ref().join(MANIFEST))?)?)
}
