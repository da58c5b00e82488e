//! Projector checkpoints.
//!
//! Layout: magic `LACP`, version `u32`, header length `u32`, a UTF-8 JSON
//! header, then every parameter matrix as little-endian `f64`, row-major,
//! concatenated in the stack's declared order. All integers little-endian.

use std::fs;
use std::path::Path;

use latent_align_core::projector::{ProjectorError, ProjectorStack, StackDims, StackLayout};
use latent_align_core::trainer::TemperatureParam;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"LACP";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {0} is not supported")]
    VersionMismatch(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint payload has {actual} bytes, expected {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("tensor table does not match the layout: {0}")]
    TensorTable(String),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dims: StackDims,
    pub layout: StackLayout,
    pub pooled_only: bool,
    pub seed: u64,
    pub log_scale: f64,
    pub dtype: String,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stack: ProjectorStack,
    pub temperature: TemperatureParam,
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            dims: self.stack.dims,
            layout: self.stack.layout(),
            pooled_only: self.stack.pooled_only,
            seed: self.stack.seed,
            log_scale: self.temperature.log_scale,
            dtype: "f64".into(),
            tensors: self
                .stack
                .named_matrices()
                .into_iter()
                .map(|(name, m)| TensorInfo {
                    name,
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("serializable header");
        let payload = self.stack.to_payload();
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + 8 * payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < PREFIX_LEN {
            return Err(CheckpointError::Truncated);
        }
        if bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch(version));
        }
        let hlen = u32_at(8) as usize;
        let body = &bytes[PREFIX_LEN..];
        if body.len() < hlen {
            return Err(CheckpointError::Truncated);
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
        if header.dtype != "f64" {
            return Err(CheckpointError::TensorTable(format!(
                "unsupported dtype {:?}",
                header.dtype
            )));
        }
        let raw = &body[hlen..];
        if raw.len() % 8 != 0 {
            return Err(CheckpointError::PayloadLength {
                expected: raw.len() / 8 * 8,
                actual: raw.len(),
            });
        }
        let payload: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let stack = ProjectorStack::from_payload(
            header.dims,
            header.layout,
            header.pooled_only,
            header.seed,
            &payload,
        )
        .map_err(|e| match e {
            ProjectorError::PayloadLength { expected, actual } => CheckpointError::PayloadLength {
                expected: expected * 8,
                actual: actual * 8,
            },
            other => other.into(),
        })?;
        let ck = Checkpoint {
            stack,
            temperature: TemperatureParam {
                log_scale: header.log_scale,
            },
        };
        if ck.header().tensors != header.tensors {
            return Err(CheckpointError::TensorTable(
                "names or shapes differ".into(),
            ));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.encode()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}
