//! CSR export of a frozen pruned model and an SpMV forward pass.
//!
//! A layer `y = x·W + b` with `W: [in, out]` is stored as the CSR form of
//! `Wᵀ` (rows = outputs, columns = inputs), so each output is one sparse
//! row dot the input.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "AMSP"            4 bytes magic
//! version           u32
//! header_len        u64
//! header            header_len bytes of UTF-8 JSON (SparseHeader)
//! for each component in header order, for each of its layers:
//!   row_offsets     (rows + 1) × u64
//!   col_indices     nnz × u64
//!   values          nnz × f64
//!   bias            rows × f64
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EffectiveWeights, ModelError, ModelSpec, MultitaskModel};
use crate::pruner::PrunerState;
use crate::tensor::Tensor;

pub const SPARSE_MAGIC: &[u8; 4] = b"AMSP";
pub const SPARSE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("pruning mask is not frozen; export needs a fixed mask")]
    NotFrozen,
    #[error("task index {index} out of range for {tasks} tasks")]
    TaskOutOfRange { index: usize, tasks: usize },
    #[error("input has {got} features, model expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("invalid CSR structure: {0}")]
    Structure(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}: malformed sparse model file")]
    Format(PathBuf),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// CSR of the transpose of a row-major `[in, out]` weight matrix, keeping
    /// the positions where `keep` is true.
    pub fn from_weight(weight: &Tensor, keep: &[bool]) -> Self {
        let (n_in, n_out) = (weight.shape()[0], weight.shape()[1]);
        let w = weight.values();
        let mut row_offsets = Vec::with_capacity(n_out + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for j in 0..n_out {
            for i in 0..n_in {
                let k = i * n_out + j;
                if keep[k] {
                    col_indices.push(i);
                    values.push(w[k]);
                }
            }
            row_offsets.push(values.len());
        }
        Self {
            n_rows: n_out,
            n_cols: n_in,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self) -> Result<(), SparseError> {
        let err = |m: &str| Err(SparseError::Structure(m.to_string()));
        if self.row_offsets.len() != self.n_rows + 1 || self.row_offsets[0] != 0 {
            return err("row_offsets length or origin");
        }
        if self.row_offsets[self.n_rows] != self.values.len()
            || self.values.len() != self.col_indices.len()
        {
            return err("nnz disagrees between offsets, indices and values");
        }
        for r in 0..self.n_rows {
            let (a, b) = (self.row_offsets[r], self.row_offsets[r + 1]);
            if a > b {
                return err("row_offsets decreasing");
            }
            let cols = &self.col_indices[a..b];
            if cols.iter().any(|c| *c >= self.n_cols) || cols.windows(2).any(|w| w[0] >= w[1]) {
                return err("column indices out of range or not strictly increasing");
            }
        }
        Ok(())
    }

    /// `y = A·x`; returns the number of multiplications performed.
    pub fn spmv(&self, x: &[f64], y: &mut [f64]) -> u64 {
        for (r, out) in y.iter_mut().enumerate().take(self.n_rows) {
            let (a, b) = (self.row_offsets[r], self.row_offsets[r + 1]);
            *out = self.col_indices[a..b]
                .iter()
                .zip(&self.values[a..b])
                .map(|(c, v)| v * x[*c])
                .sum();
        }
        self.nnz() as u64
    }

    /// Dense `[in, out]` weight matrix (the transpose back).
    pub fn densify(&self) -> Tensor {
        let mut w = vec![0.0; self.n_rows * self.n_cols];
        for r in 0..self.n_rows {
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                w[self.col_indices[k] * self.n_rows + r] = self.values[k];
            }
        }
        Tensor::new(vec![self.n_cols, self.n_rows], w).expect("positive dims")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLayer {
    pub weight: CsrMatrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseComponent {
    pub name: String,
    pub layers: Vec<SparseLayer>,
}

impl SparseComponent {
    pub fn nnz(&self) -> usize {
        self.layers.iter().map(|l| l.weight.nnz()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseModel {
    pub spec: ModelSpec,
    /// Backbone first, then heads in task order.
    pub components: Vec<SparseComponent>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerHeader {
    rows: usize,
    cols: usize,
    nnz: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ComponentHeader {
    name: String,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SparseHeader {
    spec: ModelSpec,
    components: Vec<ComponentHeader>,
}

/// Output of a sparse forward pass with its multiplication count.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOutput {
    pub prediction: Vec<f64>,
    pub mul_adds: u64,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SparseError + '_ {
    move |source| SparseError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn apply_layer(layer: &SparseLayer, h: &[f64], relu: bool) -> (Vec<f64>, u64) {
    let mut out = vec![0.0; layer.weight.n_rows];
    let n = layer.weight.spmv(h, &mut out);
    for (o, b) in out.iter_mut().zip(&layer.bias) {
        *o += b;
        if relu {
            *o = o.max(0.0);
        }
    }
    (out, n)
}

impl SparseModel {
    /// Exports the effective weights of a frozen model; pruned positions
    /// are omitted.
    pub fn export(model: &MultitaskModel, pruner: &PrunerState) -> Result<Self, SparseError> {
        let Some(masks) = pruner.masks.as_ref().filter(|_| pruner.is_frozen()) else {
            return Err(SparseError::NotFrozen);
        };
        let (eff, _) = pruner.effective(model);
        Ok(Self::from_effective(model, &eff, masks))
    }

    fn from_effective(
        model: &MultitaskModel,
        eff: &EffectiveWeights,
        masks: &[Vec<Vec<bool>>],
    ) -> Self {
        let components = model
            .components()
            .enumerate()
            .map(|(c, comp)| SparseComponent {
                name: comp.name.clone(),
                layers: comp
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(li, l)| SparseLayer {
                        weight: CsrMatrix::from_weight(&eff.layers[c][li], &masks[c][li]),
                        bias: l.bias.values().to_vec(),
                    })
                    .collect(),
            })
            .collect();
        Self {
            spec: model.spec.clone(),
            components,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.components.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.components[0].layers[0].weight.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.components.iter().map(SparseComponent::nnz).sum()
    }

    pub fn validate(&self) -> Result<(), SparseError> {
        self.components
            .iter()
            .flat_map(|c| &c.layers)
            .try_for_each(|l| l.weight.validate())
    }

    /// Dense weight matrices reconstructed from the CSR data.
    pub fn densify(&self) -> EffectiveWeights {
        EffectiveWeights {
            layers: self
                .components
                .iter()
                .map(|c| c.layers.iter().map(|l| l.weight.densify()).collect())
                .collect(),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<(), SparseError> {
        if x.len() != self.input_dim() {
            return Err(SparseError::InputWidth {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn backbone(&self, x: &[f64]) -> (Vec<f64>, u64) {
        let mut h = x.to_vec();
        let mut count = 0;
        for layer in &self.components[0].layers {
            let (out, n) = apply_layer(layer, &h, true);
            h = out;
            count += n;
        }
        (h, count)
    }

    fn head(&self, features: &[f64], task: usize) -> (Vec<f64>, u64) {
        let layers = &self.components[task + 1].layers;
        let mut h = features.to_vec();
        let mut count = 0;
        for (li, layer) in layers.iter().enumerate() {
            let (out, n) = apply_layer(layer, &h, li + 1 < layers.len());
            h = out;
            count += n;
        }
        (h, count)
    }

    /// Prediction for one sample along `task`'s path.
    pub fn spmv_forward(&self, x: &[f64], task: usize) -> Result<SparseOutput, SparseError> {
        if task >= self.num_tasks() {
            return Err(SparseError::TaskOutOfRange {
                index: task,
                tasks: self.num_tasks(),
            });
        }
        self.check_input(x)?;
        let (f, n1) = self.backbone(x);
        let (prediction, n2) = self.head(&f, task);
        Ok(SparseOutput {
            prediction,
            mul_adds: n1 + n2,
        })
    }

    /// All task predictions for one sample, sharing one backbone pass.
    pub fn spmv_forward_all(&self, x: &[f64]) -> Result<(Vec<Vec<f64>>, u64), SparseError> {
        self.check_input(x)?;
        let (f, mut count) = self.backbone(x);
        let preds = (0..self.num_tasks())
            .map(|t| {
                let (p, n) = self.head(&f, t);
                count += n;
                p
            })
            .collect();
        Ok((preds, count))
    }

    pub fn save(&self, path: &Path) -> Result<(), SparseError> {
        let header = SparseHeader {
            spec: self.spec.clone(),
            components: self
                .components
                .iter()
                .map(|c| ComponentHeader {
                    name: c.name.clone(),
                    layers: c
                        .layers
                        .iter()
                        .map(|l| LayerHeader {
                            rows: l.weight.n_rows,
                            cols: l.weight.n_cols,
                            nnz: l.weight.nnz(),
                        })
                        .collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(SPARSE_MAGIC);
        buf.extend_from_slice(&SPARSE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for layer in self.components.iter().flat_map(|c| &c.layers) {
            let m = &layer.weight;
            for v in m.row_offsets.iter().chain(&m.col_indices) {
                buf.extend_from_slice(&(*v as u64).to_le_bytes());
            }
            for v in m.values.iter().chain(&layer.bias) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, SparseError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let bad = || SparseError::Format(path.to_path_buf());
        if bytes.len() < 16 || &bytes[..4] != SPARSE_MAGIC {
            return Err(bad());
        }
        if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != SPARSE_VERSION {
            return Err(bad());
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body_start = 16usize.checked_add(hlen).ok_or_else(bad)?;
        if bytes.len() < body_start {
            return Err(bad());
        }
        let header: SparseHeader = serde_json::from_slice(&bytes[16..body_start])?;
        let mut pos = body_start;
        let mut take8 = || -> Result<[u8; 8], SparseError> {
            let chunk = bytes.get(pos..pos + 8).ok_or_else(bad)?;
            pos += 8;
            Ok(chunk.try_into().unwrap())
        };
        let mut components = Vec::new();
        for ch in &header.components {
            let mut layers = Vec::new();
            for lh in &ch.layers {
                let mut ints = |n: usize| -> Result<Vec<usize>, SparseError> {
                    (0..n)
                        .map(|_| take8().map(|b| u64::from_le_bytes(b) as usize))
                        .collect()
                };
                let row_offsets = ints(lh.rows + 1)?;
                let col_indices = ints(lh.nnz)?;
                let mut floats = |n: usize| -> Result<Vec<f64>, SparseError> {
                    (0..n).map(|_| take8().map(f64::from_le_bytes)).collect()
                };
                let values = floats(lh.nnz)?;
                let bias = floats(lh.rows)?;
                let weight = CsrMatrix {
                    n_rows: lh.rows,
                    n_cols: lh.cols,
                    row_offsets,
                    col_indices,
                    values,
                };
                weight.validate()?;
                layers.push(SparseLayer { weight, bias });
            }
            components.push(SparseComponent {
                name: ch.name.clone(),
                layers,
            });
        }
        if pos != bytes.len() {
            return Err(bad());
        }
        Ok(Self {
            spec: header.spec,
            components,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_inputs: usize,
    pub dense_median_ns: f64,
    pub sparse_median_ns: f64,
    pub dense_mul_adds: u64,
    pub sparse_mul_adds: u64,
    pub mul_add_ratio: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times full multitask inference (backbone once, every head) per sample
/// on both paths. Mul-add counts are per sample.
pub fn bench(
    sparse: &SparseModel,
    dense: &MultitaskModel,
    dense_weights: &EffectiveWeights,
    n_inputs: usize,
    seed: u64,
) -> Result<BenchReport, SparseError> {
    let d = sparse.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = (0..n_inputs.max(1))
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let dense_mul_adds: u64 = dense
        .components()
        .map(|c| c.weight_count() as u64)
        .sum();
    let mut dense_t = Vec::with_capacity(inputs.len());
    let mut sparse_t = Vec::with_capacity(inputs.len());
    let mut sparse_mul_adds = 0;
    for x in &inputs {
        let xt = Tensor::vector(x.clone());
        let start = Instant::now();
        let preds = dense.forward_all_with(&xt, dense_weights)?;
        std::hint::black_box(preds);
        dense_t.push(start.elapsed().as_nanos().max(1) as f64);

        let start = Instant::now();
        let (preds, n) = sparse.spmv_forward_all(x)?;
        std::hint::black_box(preds);
        sparse_t.push(start.elapsed().as_nanos().max(1) as f64);
        sparse_mul_adds = n;
    }
    Ok(BenchReport {
        n_inputs: inputs.len(),
        dense_median_ns: median(&mut dense_t),
        sparse_median_ns: median(&mut sparse_t),
        dense_mul_adds,
        sparse_mul_adds,
        mul_add_ratio: sparse_mul_adds as f64 / dense_mul_adds as f64,
    })
}
