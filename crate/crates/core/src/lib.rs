//! Multitask pruning with learnable per-component soft thresholds and
//! adaptive task-loss weighting.
//!
//! The pieces, bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode tape.
//! - [`model`]: shared-backbone multitask MLP split into components.
//! - [`pruner`]: soft thresholds, indicator masks and mask freezing.
//! - [`weighting`]: loss windows and the adaptive task weights.
//! - [`trainer`]: the training loop and its baselines.
//! - [`data`], [`metrics`], [`sparse`], [`checkpoint`]: synthetic data,
//!   normalized scores and FLOPs, CSR inference, run persistence.

pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod model;
pub mod pruner;
pub mod sparse;
pub mod tensor;
pub mod trainer;
pub mod weighting;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use data::{SynthDataset, TaskKind, TaskSpec};
pub use metrics::{Convention, Direction, MetricTable, RunReport, TaskMetric};
pub use model::{HeadSpec, ModelSpec, MultitaskModel};
pub use pruner::{PrunerKind, PrunerState, SparsitySnapshot};
pub use sparse::SparseModel;
pub use tensor::{LossKind, Tape, Tensor};
pub use trainer::{train, RunLog, TrainConfig, TrainError, Trainer};
pub use weighting::WeightingState;
