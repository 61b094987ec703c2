//! Versioned binary checkpoints.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "CPRMCKPT"
//! 8       4     format version, u32 little-endian
//! 12      8     header length H, u64 little-endian
//! 20      H     header, compact JSON (architecture, seed, metadata, tensor names and shapes)
//! 20+H    8·P   parameter values, f64 little-endian, in header order
//! end-32  32    SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Architecture, Model, ModelError, ModelKind};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CPRMCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREAMBLE_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("architecture mismatch: checkpoint holds a {found} model, expected {expected}")]
    ArchitectureMismatch { expected: ModelKind, found: ModelKind },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    seed: u64,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub seed: u64,
    pub metadata: BTreeMap<String, String>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, metadata: BTreeMap<String, String>) -> Self {
        Checkpoint {
            architecture: model.architecture(),
            seed,
            metadata,
            params: model.params().clone(),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.architecture.kind()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            architecture: self.architecture.clone(),
            seed: self.seed,
            metadata: self.metadata.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + 8 * self.params.num_scalars() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(if bytes.len() < 8 {
                CheckpointError::Corrupt("file shorter than the preamble".into())
            } else {
                CheckpointError::BadMagic
            });
        }
        if bytes.len() < PREAMBLE_LEN + DIGEST_LEN {
            return Err(CheckpointError::Corrupt("file shorter than the preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Corrupt("digest mismatch (truncated or modified file)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = PREAMBLE_LEN
            .checked_add(header_len)
            .filter(|&end| end <= body.len())
            .ok_or_else(|| CheckpointError::Corrupt("header length exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&body[PREAMBLE_LEN..data_start])
            .map_err(|e| CheckpointError::Corrupt(format!("unreadable header: {e}")))?;
        let mut data = &body[data_start..];
        let mut params = ParamSet::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < 8 * n {
                return Err(CheckpointError::Corrupt(format!("tensor {} is truncated", entry.name)));
            }
            let (chunk, rest) = data.split_at(8 * n);
            data = rest;
            let values = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(entry.shape, values).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            params.push(entry.name, t);
        }
        if !data.is_empty() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", data.len())));
        }
        Ok(Checkpoint {
            architecture: header.architecture,
            seed: header.seed,
            metadata: header.metadata,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn into_model(self) -> Result<Model, CheckpointError> {
        Ok(Model::from_params(&self.architecture, self.params)?)
    }

    /// Rebuilds the model, failing unless it is of the `expected` kind.
    pub fn into_model_of(self, expected: ModelKind) -> Result<Model, CheckpointError> {
        if self.kind() != expected {
            return Err(CheckpointError::ArchitectureMismatch {
                expected,
                found: self.kind(),
            });
        }
        self.into_model()
    }
}

pub fn save_checkpoint(model: &Model, seed: u64, path: &Path) -> Result<(), CheckpointError> {
    Checkpoint::from_model(model, seed, BTreeMap::new()).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    Checkpoint::load(path)?.into_model()
}
