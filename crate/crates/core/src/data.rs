//! Deterministic synthetic multitask datasets.
//!
//! Inputs are standard normal; a fixed random map gives a shared latent
//! `z = tanh(G·x)`, and each task reads `z` through its own teacher matrix.
//! Regression tasks add Gaussian noise, classification tasks take the argmax
//! and direction tasks normalize to unit length.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{LossKind, Tensor};

pub const MAGIC: &[u8; 4] = b"AMTL";
pub const FORMAT_VERSION: u32 = 1;
pub const GENERATOR_VERSION: u32 = 1;
/// Fraction of samples assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least 10 samples, got {0}")]
    TooFewSamples(usize),
    #[error("input_dim must be >= 2, got {0}")]
    InputDim(usize),
    #[error("at least one task is required")]
    NoTasks,
    #[error("duplicate task name `{0}`")]
    DuplicateTask(String),
    #[error("task `{0}`: output_dim must be >= 1 (>= 2 for classification)")]
    OutputDim(String),
    #[error("task `{0}`: noise level must be finite and >= 0")]
    Noise(String),
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error("batch size {batch} exceeds split size {split}")]
    BatchSize { batch: usize, split: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}: malformed dataset file")]
    Format(PathBuf),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Regression,
    Classification,
    Direction,
}

impl TaskKind {
    /// Training loss used for this kind of task.
    pub fn loss(self) -> LossKind {
        match self {
            Self::Regression => LossKind::L1,
            Self::Classification => LossKind::CrossEntropy,
            Self::Direction => LossKind::NegativeCosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub output_dim: usize,
    #[serde(default)]
    pub noise: f64,
}

/// Row-major `[rows × cols]` matrix drawn at generation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Teacher {
    fn draw(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (cols as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        Self { rows, cols, values }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.values
            .chunks(self.cols)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(DataError::UnknownSplit(other.to_string())),
        }
    }
}

/// Metadata stored next to the columnar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub generator_version: u32,
    pub seed: u64,
    pub n_samples: usize,
    pub input_dim: usize,
    pub tasks: Vec<TaskSpec>,
    pub latent_map: Teacher,
    pub teachers: Vec<Teacher>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub seed: u64,
    pub generator_version: u32,
    pub tasks: Vec<TaskSpec>,
    /// `[N, d]`.
    pub inputs: Tensor,
    /// Per task: `[N, out]` for regression and direction, `[N]` class
    /// indices for classification.
    pub targets: Vec<Tensor>,
    pub latent_map: Teacher,
    pub teachers: Vec<Teacher>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One minibatch gathered from a split.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Tensor,
    pub targets: Vec<Tensor>,
}

/// Checks generation parameters without drawing anything.
pub fn validate_specs(n: usize, d: usize, tasks: &[TaskSpec]) -> Result<(), DataError> {
    if n < 10 {
        return Err(DataError::TooFewSamples(n));
    }
    if d < 2 {
        return Err(DataError::InputDim(d));
    }
    if tasks.is_empty() {
        return Err(DataError::NoTasks);
    }
    let mut seen = std::collections::HashSet::new();
    for t in tasks {
        if !seen.insert(t.name.as_str()) {
            return Err(DataError::DuplicateTask(t.name.clone()));
        }
        let min_out = if t.kind == TaskKind::Classification { 2 } else { 1 };
        if t.output_dim < min_out {
            return Err(DataError::OutputDim(t.name.clone()));
        }
        if !t.noise.is_finite() || t.noise < 0.0 {
            return Err(DataError::Noise(t.name.clone()));
        }
    }
    Ok(())
}

impl SynthDataset {
    pub fn generate(
        seed: u64,
        n_samples: usize,
        input_dim: usize,
        tasks: &[TaskSpec],
    ) -> Result<Self, DataError> {
        validate_specs(n_samples, input_dim, tasks)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent_map = Teacher::draw(input_dim, input_dim, &mut rng);
        let teachers: Vec<Teacher> = tasks
            .iter()
            .map(|t| Teacher::draw(t.output_dim, input_dim, &mut rng))
            .collect();
        let inputs: Vec<f64> = (0..n_samples * input_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut targets: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];
        for row in inputs.chunks(input_dim) {
            let z: Vec<f64> = latent_map.apply(row).into_iter().map(f64::tanh).collect();
            for (ti, (spec, teacher)) in tasks.iter().zip(&teachers).enumerate() {
                let y = teacher.apply(&z);
                match spec.kind {
                    TaskKind::Regression => {
                        for v in y {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            targets[ti].push(v + spec.noise * e);
                        }
                    }
                    TaskKind::Classification => {
                        let arg = y
                            .iter()
                            .enumerate()
                            .fold(0, |best, (i, v)| if *v > y[best] { i } else { best });
                        targets[ti].push(arg as f64);
                    }
                    TaskKind::Direction => {
                        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n > 0.0 {
                            targets[ti].extend(y.iter().map(|v| v / n));
                        } else {
                            let mut unit = vec![0.0; y.len()];
                            unit[0] = 1.0;
                            targets[ti].extend(unit);
                        }
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut rng);
        let n_train = ((n_samples as f64) * TRAIN_FRACTION).round() as usize;
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Self::assemble(
            seed,
            GENERATOR_VERSION,
            tasks.to_vec(),
            input_dim,
            inputs,
            targets,
            latent_map,
            teachers,
            train,
            test,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        seed: u64,
        generator_version: u32,
        tasks: Vec<TaskSpec>,
        input_dim: usize,
        inputs: Vec<f64>,
        targets: Vec<Vec<f64>>,
        latent_map: Teacher,
        teachers: Vec<Teacher>,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self, DataError> {
        let n = inputs.len() / input_dim;
        let inputs = Tensor::new(vec![n, input_dim], inputs).map_err(|_| DataError::NoTasks)?;
        let targets = tasks
            .iter()
            .zip(targets)
            .map(|(spec, t)| {
                let shape = match spec.kind {
                    TaskKind::Classification => vec![n],
                    _ => vec![n, spec.output_dim],
                };
                Tensor::new(shape, t).map_err(|_| DataError::OutputDim(spec.name.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            seed,
            generator_version,
            tasks,
            inputs,
            targets,
            latent_map,
            teachers,
            train,
            test,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    fn target_width(&self, task: usize) -> usize {
        match self.tasks[task].kind {
            TaskKind::Classification => 1,
            _ => self.tasks[task].output_dim,
        }
    }

    /// Gathers the given rows into one batch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let d = self.input_dim();
        let x: Vec<f64> = indices
            .iter()
            .flat_map(|&i| self.inputs.values()[i * d..(i + 1) * d].iter().copied())
            .collect();
        let targets = (0..self.tasks.len())
            .map(|t| {
                let w = self.target_width(t);
                let v: Vec<f64> = indices
                    .iter()
                    .flat_map(|&i| self.targets[t].values()[i * w..(i + 1) * w].iter().copied())
                    .collect();
                let shape = match self.tasks[t].kind {
                    TaskKind::Classification => vec![indices.len()],
                    _ => vec![indices.len(), w],
                };
                Tensor::new(shape, v).expect("non-empty batch")
            })
            .collect();
        Batch {
            indices: indices.to_vec(),
            x: Tensor::new(vec![indices.len(), d], x).expect("non-empty batch"),
            targets,
        }
    }

    /// Shuffled minibatches covering the split exactly once; the last batch
    /// may be short.
    pub fn batches(
        &self,
        split: Split,
        batch_size: usize,
        epoch_seed: u64,
    ) -> Result<impl Iterator<Item = Batch> + '_, DataError> {
        let ids = self.split(split);
        if batch_size == 0 || batch_size > ids.len() {
            return Err(DataError::BatchSize {
                batch: batch_size,
                split: ids.len(),
            });
        }
        let mut order = ids.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        Ok(chunks.into_iter().map(move |c| self.gather(&c)))
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            format_version: FORMAT_VERSION,
            generator_version: self.generator_version,
            seed: self.seed,
            n_samples: self.num_samples(),
            input_dim: self.input_dim(),
            tasks: self.tasks.clone(),
            latent_map: self.latent_map.clone(),
            teachers: self.teachers.clone(),
            train: self.train.clone(),
            test: self.test.clone(),
        }
    }

    /// Writes `<path>` (columnar floats) and `<path>.json` (sidecar).
    ///
    /// Byte layout: `"AMTL"`, `u32` version, then little-endian `f64`s: the
    /// `N × d` inputs row-major, followed by each task's targets in task
    /// order (`N × output_dim`, or `N` class indices for classification).
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut buf = Vec::with_capacity(8 + 8 * self.inputs.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in self
            .inputs
            .values()
            .iter()
            .chain(self.targets.iter().flat_map(|t| t.values()))
        {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&buf).map_err(io_err(path))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        fs::write(&side, json).map_err(io_err(&side))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let side = sidecar_path(path);
        let meta: Sidecar =
            serde_json::from_str(&fs::read_to_string(&side).map_err(io_err(&side))?)?;
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(io_err(path))?
            .read_to_end(&mut bytes)
            .map_err(io_err(path))?;
        let bad = || DataError::Format(path.to_path_buf());
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION || (bytes.len() - 8) % 8 != 0 {
            return Err(bad());
        }
        let floats: Vec<f64> = bytes[8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let n = meta.n_samples;
        let widths: Vec<usize> = meta
            .tasks
            .iter()
            .map(|t| match t.kind {
                TaskKind::Classification => 1,
                _ => t.output_dim,
            })
            .collect();
        let expected = n * (meta.input_dim + widths.iter().sum::<usize>());
        if floats.len() != expected {
            return Err(bad());
        }
        let mut offset = n * meta.input_dim;
        let inputs = floats[..offset].to_vec();
        let targets = widths
            .iter()
            .map(|w| {
                let t = floats[offset..offset + n * w].to_vec();
                offset += n * w;
                t
            })
            .collect();
        validate_specs(n, meta.input_dim, &meta.tasks)?;
        Self::assemble(
            meta.seed,
            meta.generator_version,
            meta.tasks,
            meta.input_dim,
            inputs,
            targets,
            meta.latent_map,
            meta.teachers,
            meta.train,
            meta.test,
        )
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// The three default tasks: clean regression, noisy regression and a
/// 4-class classification.
pub fn default_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            name: "clean".into(),
            kind: TaskKind::Regression,
            output_dim: 2,
            noise: 0.0,
        },
        TaskSpec {
            name: "noisy".into(),
            kind: TaskKind::Regression,
            output_dim: 2,
            noise: 0.3,
        },
        TaskSpec {
            name: "class".into(),
            kind: TaskKind::Classification,
            output_dim: 4,
            noise: 0.0,
        },
    ]
}
