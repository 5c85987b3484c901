//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CBCK"            4 bytes magic
//! version           u32
//! header_len        u32
//! header            header_len bytes of UTF-8 JSON: architecture, layer
//!                   table with shapes and offsets, config snapshot, seed,
//!                   epoch
//! weight_count      u64
//! weights           weight_count IEEE-754 f32 values
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{layer_names, Architecture, Model, NnError, PolicyModel, Shape};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CBCK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("layer table does not match the architecture")]
    LayerTable,
    #[error(transparent)]
    Model(#[from] NnError),
}

/// One row of the layer table stored with a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub spec: super::LayerSpec,
    pub input: Shape,
    pub output: Shape,
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    layers: Vec<LayerEntry>,
    config: serde_json::Value,
    seed: u64,
    epoch: usize,
}

/// Weights plus everything needed to rebuild and attribute them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub architecture: Architecture,
    pub layers: Vec<LayerEntry>,
    pub weights: Vec<f32>,
    /// Snapshot of the training configuration that produced the weights.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Zero-based epoch after which the checkpoint was taken.
    pub epoch: usize,
}

fn layer_table(arch: &Architecture) -> Result<Vec<LayerEntry>, NnError> {
    let resolved = arch.resolve()?;
    let names = layer_names(&resolved);
    Ok(resolved
        .iter()
        .zip(names)
        .map(|(l, name)| LayerEntry {
            name,
            spec: l.spec,
            input: l.input,
            output: l.output,
            weight_offset: l.weights.start,
            weight_len: l.weights.len(),
            bias_offset: l.bias.start,
            bias_len: l.bias.len(),
        })
        .collect())
}

impl ModelCheckpoint {
    pub fn from_model(
        model: &PolicyModel,
        config: serde_json::Value,
        seed: u64,
        epoch: usize,
    ) -> Self {
        Self {
            architecture: model.architecture().clone(),
            layers: layer_table(model.architecture()).expect("model architecture is resolved"),
            weights: model.params().to_vec(),
            config,
            seed,
            epoch,
        }
    }

    pub fn to_model(&self) -> Result<PolicyModel, CheckpointError> {
        if layer_table(&self.architecture)? != self.layers {
            return Err(CheckpointError::LayerTable);
        }
        Ok(Model::from_params(self.architecture.clone(), self.weights.clone())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            architecture: self.architecture.clone(),
            layers: self.layers.clone(),
            config: self.config.clone(),
            seed: self.seed,
            epoch: self.epoch,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 4 * self.weights.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or(CheckpointError::Truncated);
        if take(0, 4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(12, hlen)?)?;
        let at = 12 + hlen;
        let count = u64::from_le_bytes(take(at, 8)?.try_into().unwrap()) as usize;
        let blob = take(at + 8, count.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let weights = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ckpt = Self {
            architecture: header.architecture,
            layers: header.layers,
            weights,
            config: header.config,
            seed: header.seed,
            epoch: header.epoch,
        };
        let expected = ckpt.architecture.param_count()?;
        if expected != ckpt.weights.len() {
            return Err(NnError::ParamCount {
                expected,
                actual: ckpt.weights.len(),
            }
            .into());
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
