//! Versioned binary model file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "STYLEMAP"
//! version      u32
//! header_len   u32
//! header       header_len bytes of JSON
//! parameters   f32 values of every tensor, in declaration order
//! checksum     32 bytes, SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor2D;
use crate::flow::{FlowConfig, FlowError, FlowModel};
use crate::pcc::MONOMIAL_ORDER_ID;

pub const MAGIC: &[u8; 8] = b"STYLEMAP";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;
const PREFIX_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContainerError {
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("model file version {found} is not supported (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("model file is truncated")]
    Truncated,
    #[error("checksum mismatch: the model file is corrupted")]
    Checksum,
    #[error("invalid header: {0}")]
    Header(String),
    #[error("monomial order `{0}` is not supported")]
    MonomialOrder(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub config: FlowConfig,
    pub monomial_order: String,
    pub permutations: Vec<Vec<usize>>,
    pub actnorm_ready: bool,
    pub tensors: Vec<TensorEntry>,
    /// Free-form training metadata (configuration, final scores).
    #[serde(default)]
    pub training: serde_json::Value,
}

/// A model together with its file metadata.
#[derive(Clone, Debug)]
pub struct ModelContainer {
    pub model: FlowModel<f32>,
    pub training: serde_json::Value,
}

impl ModelContainer {
    pub fn new(model: FlowModel<f32>) -> Self {
        Self {
            model,
            training: serde_json::Value::Null,
        }
    }

    pub fn with_training(model: FlowModel<f32>, training: serde_json::Value) -> Self {
        Self { model, training }
    }

    fn header(&self) -> ContainerHeader {
        ContainerHeader {
            config: self.model.config().clone(),
            monomial_order: MONOMIAL_ORDER_ID.to_owned(),
            permutations: self.model.permutations(),
            actnorm_ready: self.model.actnorm_ready(),
            tensors: self
                .model
                .params()
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_owned(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
            training: self.training.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("headers serialize");
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + 4 * self.model.num_params() + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.model.params().iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        if bytes.len() < PREFIX_LEN + CHECKSUM_LEN {
            return Err(ContainerError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(ContainerError::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ContainerError::Checksum);
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let header_end = PREFIX_LEN.checked_add(header_len).ok_or(ContainerError::Truncated)?;
        if header_end > body.len() {
            return Err(ContainerError::Truncated);
        }
        let header: ContainerHeader =
            serde_json::from_slice(&body[PREFIX_LEN..header_end]).map_err(|e| ContainerError::Header(e.to_string()))?;
        if header.monomial_order != MONOMIAL_ORDER_ID {
            return Err(ContainerError::MonomialOrder(header.monomial_order));
        }
        let mut blob = body[header_end..].chunks_exact(4);
        let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        if blob.len() != expected || !blob.remainder().is_empty() {
            return Err(ContainerError::Header(format!(
                "parameter blob holds {} bytes, header declares {expected} values",
                body.len() - header_end
            )));
        }
        let mut values = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let data: Vec<f32> = (&mut blob)
                .take(t.rows * t.cols)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            values.push(Tensor2D::from_vec(t.rows, t.cols, data).map_err(|e| ContainerError::Header(format!("{}: {e}", t.name)))?);
        }
        let model = FlowModel::from_parts(header.config, &header.permutations, values, header.actnorm_ready)?;
        let names: Vec<&str> = model.params().iter().map(|(n, _)| n).collect();
        if names.iter().zip(&header.tensors).any(|(a, b)| *a != b.name) {
            return Err(ContainerError::Header("tensor names do not match the configuration".into()));
        }
        Ok(Self {
            model,
            training: header.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        fs::write(path, self.to_bytes()).map_err(|e| io_error(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Short identifier: the first 16 hex digits of the file checksum.
    pub fn model_id(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - CHECKSUM_LEN..][..8])
    }
}

fn io_error(path: &Path, e: std::io::Error) -> ContainerError {
    ContainerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}
