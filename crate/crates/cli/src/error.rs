use std::io;
use std::path::{Path, PathBuf};

use adapmtl::checkpoint::CheckpointError;
use adapmtl::data::DataError;
use adapmtl::metrics::MetricsError;
use adapmtl::sparse::SparseError;
use adapmtl::trainer::TrainError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}: pruning mask is not frozen; nothing to export")]
    NotFrozen(PathBuf),
    #[error("{0}")]
    Failed(String),
}

/// Machine-readable error line printed on failure.
#[derive(Debug, Serialize)]
pub struct ErrorRecord<'a> {
    pub error: &'a str,
    pub exit_code: i32,
    pub message: String,
}

impl CliError {
    pub fn io(path: &Path, e: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Divergence(_) => 3,
            Self::Io { .. } => 4,
            Self::NotFrozen(_) => 5,
            Self::Failed(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Divergence(_) => "divergence",
            Self::Io { .. } => "io",
            Self::NotFrozen(_) => "not-frozen",
            Self::Failed(_) => "failed",
        }
    }

    pub fn record(&self) -> ErrorRecord<'_> {
        ErrorRecord {
            error: self.kind(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => Self::Divergence(e.to_string()),
            TrainError::Config(_) | TrainError::TaskCount { .. } | TrainError::TaskMismatch { .. } => {
                Self::Config(e.to_string())
            }
            TrainError::Data(d) => d.into(),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { path, source } => Self::Io {
                path,
                message: source.to_string(),
            },
            DataError::Format(_) | DataError::Sidecar(_) => Self::Failed(e.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { path, source } => Self::Io {
                path,
                message: source.to_string(),
            },
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<SparseError> for CliError {
    fn from(e: SparseError) -> Self {
        match e {
            SparseError::Io { path, source } => Self::Io {
                path,
                message: source.to_string(),
            },
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::Config(e.to_string())
    }
}
