//! JSON checkpoints of a training run.
//!
//! A checkpoint captures the whole [`Trainer`] state: raw weights,
//! thresholds, frozen masks, loss windows, the epoch and step counters and
//! the log so far. Shuffling is derived from `(seed, epoch)`, so the seed
//! and epoch stand in for the RNG state. Floats round-trip exactly, so
//! resuming reproduces an uninterrupted run bit for bit.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::MultitaskModel;
use crate::pruner::PrunerState;
use crate::trainer::{RunLog, TrainConfig, Trainer};
use crate::weighting::WeightingState;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("checkpoint format version {found}, expected {CHECKPOINT_VERSION}")]
    Version { found: u32 },
    #[error("config hash mismatch: checkpoint {stored}, recomputed {computed}")]
    ConfigHash { stored: String, computed: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub model: MultitaskModel,
    pub pruner: PrunerState,
    pub weighting: WeightingState,
    pub epoch: usize,
    pub step: u64,
    /// Shuffle seed source; with `epoch` this fixes every later batch order.
    pub rng_seed: u64,
    pub log: RunLog,
}

/// SHA-256 of the config's JSON form, hex encoded.
pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config_hash: config_hash(&t.config),
            config: t.config.clone(),
            model: t.model.clone(),
            pruner: t.pruner.clone(),
            weighting: t.weighting.clone(),
            epoch: t.epoch,
            step: t.step,
            rng_seed: t.config.seed,
            log: t.log.clone(),
        }
    }

    pub fn into_trainer(self) -> Trainer {
        Trainer {
            config: self.config,
            model: self.model,
            pruner: self.pruner,
            weighting: self.weighting,
            epoch: self.epoch,
            step: self.step,
            log: self.log,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ck: Self = serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: ck.format_version,
            });
        }
        let computed = config_hash(&ck.config);
        if computed != ck.config_hash {
            return Err(CheckpointError::ConfigHash {
                stored: ck.config_hash,
                computed,
            });
        }
        Ok(ck)
    }
}
