//! Named trainable parameters and the checkpoint file format.
//!
//! A checkpoint is one file: a single-line JSON header followed by the
//! concatenated little-endian f64 parameter payload. The header carries
//! the entry names/shapes, the training seed, a hash of the model config
//! and the SHA-256 of the payload.

use super::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// One trainable array with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether weight decay applies (weights yes; biases, norms and
    /// embeddings no).
    pub decay: bool,
}

/// Insertion-ordered set of parameters with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Add a parameter; panics on duplicate names (a model wiring bug).
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> usize {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            decay,
        });
        self.params.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint header: {0}")]
    BadHeader(String),
    #[error("checkpoint payload checksum mismatch")]
    ChecksumMismatch,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    decay: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    model_kind: String,
    config: serde_json::Value,
    config_sha256: String,
    seed: u64,
    entries: Vec<HeaderEntry>,
    payload_len: u64,
    payload_sha256: String,
}

/// A loaded checkpoint: the metadata plus the parameter set.
#[derive(Debug)]
pub struct Checkpoint {
    pub model_kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub params: ParamSet,
}

pub fn write_checkpoint(
    path: &Path,
    model_kind: &str,
    config: &serde_json::Value,
    seed: u64,
    set: &ParamSet,
) -> Result<(), CheckpointError> {
    let mut payload = Vec::with_capacity(set.num_values() * 8);
    for p in &set.params {
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let config_text = serde_json::to_string(config)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let header = Header {
        schema_version: 1,
        model_kind: model_kind.to_string(),
        config: config.clone(),
        config_sha256: hex(&Sha256::digest(config_text.as_bytes())),
        seed,
        entries: set
            .params
            .iter()
            .map(|p| HeaderEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                decay: p.decay,
            })
            .collect(),
        payload_len: payload.len() as u64,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer(&mut file, &header)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    file.write_all(b"\n")?;
    file.write_all(&payload)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::BadHeader("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    if header.schema_version != 1 {
        return Err(CheckpointError::BadHeader(format!(
            "unsupported schema version {}",
            header.schema_version
        )));
    }
    let payload = &bytes[newline + 1..];
    if payload.len() as u64 != header.payload_len
        || hex(&Sha256::digest(payload)) != header.payload_sha256
    {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let mut set = ParamSet::new();
    let mut offset = 0;
    for e in &header.entries {
        let numel: usize = e.shape.iter().product();
        let end = offset + numel * 8;
        if end > payload.len() {
            return Err(CheckpointError::BadHeader(format!(
                "entry {} overruns payload",
                e.name
            )));
        }
        let data: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::from_vec(&e.shape, data)
            .map_err(|err| CheckpointError::BadHeader(err.to_string()))?;
        set.add(e.name.clone(), value, e.decay);
        offset = end;
    }
    if offset != payload.len() {
        return Err(CheckpointError::BadHeader("payload has trailing bytes".into()));
    }
    Ok(Checkpoint {
        model_kind: header.model_kind,
        config: header.config,
        seed: header.seed,
        params: set,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
