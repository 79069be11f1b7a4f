//! `NBCK1` checkpoint files.
//!
//! Layout: the 5-byte magic, a little-endian `u32` metadata length, the JSON
//! metadata (`{"config": ..., "params": [{"name", "shape"}]}`), then every
//! parameter's `f32` values little-endian in metadata order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"NBCK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an NBCK1 checkpoint")]
    BadMagic,
    #[error("checkpoint truncated: {0}")]
    Truncated(&'static str),
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("checkpoint parameters: {0}")]
    Params(#[from] super::EngineError),
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: serde_json::Value,
    params: Vec<ParamMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn encode(
        config: &serde_json::Value,
        store: &ParamStore,
    ) -> Result<Vec<u8>, CheckpointError> {
        let meta = Metadata {
            config: config.clone(),
            params: store
                .iter()
                .map(|(name, p)| ParamMeta {
                    name: name.to_string(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(9 + json.len() + 4 * store.num_values());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 9 {
            return Err(CheckpointError::Truncated("header"));
        }
        if &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(9..9 + len)
            .ok_or(CheckpointError::Truncated("metadata"))?;
        let meta: Metadata = serde_json::from_slice(json)?;
        let mut rest = &bytes[9 + len..];
        let mut store = ParamStore::new();
        for p in meta.params {
            let count: usize = p.shape.iter().product();
            let raw = rest
                .get(..4 * count)
                .ok_or(CheckpointError::Truncated("parameter data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            store.insert(p.name, Tensor::new(p.shape, data)?)?;
            rest = &rest[4 * count..];
        }
        if !rest.is_empty() {
            return Err(CheckpointError::Truncated(
                "trailing bytes after parameters",
            ));
        }
        Ok(Self {
            config: meta.config,
            store,
        })
    }
}

pub fn write_checkpoint(
    path: &Path,
    config: &serde_json::Value,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    fs::write(path, Checkpoint::encode(config, store)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::decode(&fs::read(path)?)
}
