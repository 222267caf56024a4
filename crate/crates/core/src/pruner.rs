//! Learnable soft-threshold pruning.
//!
//! Each component `c` owns a threshold `alpha_c = sigmoid(theta_c)`. During
//! training the model only ever sees `S(w, alpha) = sign(w)·max(|w| − alpha, 0)`;
//! the indicator mask `B = [|w| > alpha]` gates the weight gradient, and the
//! threshold itself is learned through `dS/dalpha = −sign(w)` on surviving
//! weights. Once overall sparsity reaches the target the masks are frozen.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EffectiveWeights, MultitaskModel};
use crate::tensor::{sigmoid, sigmoid_prime, sign, soft_threshold_scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum PrunerError {
    #[error("threshold alpha = {0} outside [0, 1)")]
    AlphaRange(f64),
    #[error("shape mismatch: {0} vs {1} elements")]
    Shape(usize, usize),
    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),
}

pub type Mask = Vec<bool>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrunerKind {
    /// One learnable threshold per component.
    Adapmtl,
    /// One learnable threshold shared by every component.
    SharedThreshold,
    /// Iterative global magnitude pruning with hard masks.
    MagnitudeIterative,
    None,
}

impl PrunerKind {
    pub fn uses_thresholds(self) -> bool {
        matches!(self, Self::Adapmtl | Self::SharedThreshold)
    }
}

impl std::fmt::Display for PrunerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adapmtl => "adapmtl",
            Self::SharedThreshold => "shared-threshold",
            Self::MagnitudeIterative => "magnitude-iterative",
            Self::None => "none",
        })
    }
}

impl std::str::FromStr for PrunerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adapmtl" => Ok(Self::Adapmtl),
            "shared-threshold" => Ok(Self::SharedThreshold),
            "magnitude-iterative" => Ok(Self::MagnitudeIterative),
            "none" => Ok(Self::None),
            other => Err(format!("unknown pruner kind `{other}`")),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<(), PrunerError> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(PrunerError::AlphaRange(alpha))
    }
}

pub fn soft_threshold(w: &Tensor, alpha: f64) -> Result<Tensor, PrunerError> {
    check_alpha(alpha)?;
    let v = w.values().iter().map(|x| soft_threshold_scalar(*x, alpha)).collect();
    Ok(Tensor::new(w.shape().to_vec(), v).expect("same shape"))
}

/// `B[i] = 1` iff `|w[i]| > alpha`; ties count as pruned.
pub fn indicator_mask(w: &Tensor, alpha: f64) -> Result<Tensor, PrunerError> {
    let bits = indicator_bits(w.values(), alpha)?;
    let v = bits.into_iter().map(|b| f64::from(u8::from(b))).collect();
    Ok(Tensor::new(w.shape().to_vec(), v).expect("same shape"))
}

pub fn indicator_bits(w: &[f64], alpha: f64) -> Result<Mask, PrunerError> {
    check_alpha(alpha)?;
    Ok(w.iter().map(|x| x.abs() > alpha).collect())
}

/// `w ← w − lr·(g ⊙ B) − lr·wd·w`.
pub fn weight_grad_update(
    w: &mut [f64],
    grad_wrt_s: &[f64],
    mask: &[bool],
    lr: f64,
    weight_decay: f64,
) -> Result<(), PrunerError> {
    if w.len() != grad_wrt_s.len() {
        return Err(PrunerError::Shape(w.len(), grad_wrt_s.len()));
    }
    if w.len() != mask.len() {
        return Err(PrunerError::Shape(w.len(), mask.len()));
    }
    if lr.is_nan() || lr < 0.0 {
        return Err(PrunerError::LearningRate(lr));
    }
    for ((wi, gi), bi) in w.iter_mut().zip(grad_wrt_s).zip(mask) {
        let g = if *bi { *gi } else { 0.0 };
        *wi -= lr * g + lr * weight_decay * *wi;
    }
    Ok(())
}

/// `dL/dtheta = −sigmoid'(theta) · Σ sign(w)·(dL/dS)·B` over every weight
/// tensor governed by this threshold.
pub fn theta_gradient<'a>(
    theta: f64,
    tensors: impl IntoIterator<Item = (&'a [f64], &'a [f64], &'a [bool])>,
) -> f64 {
    let mut acc = 0.0;
    for (w, g, b) in tensors {
        for ((wi, gi), bi) in w.iter().zip(g).zip(b) {
            if *bi {
                acc += sign(*wi) * gi;
            }
        }
    }
    -sigmoid_prime(theta) * acc
}

/// One SGD step on theta with decay and a constant upward drift.
pub fn theta_grad_update(theta: f64, grad: f64, lr: f64, decay: f64, drift: f64) -> f64 {
    theta - lr * grad - lr * decay * theta + lr * drift
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSparsity {
    pub name: String,
    pub nnz: usize,
    pub total: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsitySnapshot {
    pub epoch: usize,
    pub components: Vec<ComponentSparsity>,
    pub overall: f64,
}

impl SparsitySnapshot {
    pub fn nnz(&self) -> Vec<usize> {
        self.components.iter().map(|c| c.nnz).collect()
    }

    pub fn total_nnz(&self) -> usize {
        self.components.iter().map(|c| c.nnz).sum()
    }

    pub fn total_weights(&self) -> usize {
        self.components.iter().map(|c| c.total).sum()
    }

    fn from_counts(epoch: usize, counts: Vec<(String, usize, usize)>) -> Self {
        let components: Vec<_> = counts
            .into_iter()
            .map(|(name, nnz, total)| ComponentSparsity {
                name,
                nnz,
                total,
                sparsity: 1.0 - nnz as f64 / total as f64,
            })
            .collect();
        let nnz: usize = components.iter().map(|c| c.nnz).sum();
        let total: usize = components.iter().map(|c| c.total).sum();
        Self {
            epoch,
            components,
            overall: 1.0 - nnz as f64 / total as f64,
        }
    }
}

/// Per-run pruning state: thresholds, masks and the freeze flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunerState {
    pub kind: PrunerKind,
    pub target_sparsity: f64,
    pub theta_init: f64,
    pub thetas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Number of components tied to each theta.
    pub tied: Vec<usize>,
    /// Fixed masks per component per layer: the frozen pattern for the
    /// threshold kinds, the hard pattern for magnitude pruning.
    pub masks: Option<Vec<Vec<Mask>>>,
    pub freeze_triggered: bool,
    pub freeze_epoch: Option<usize>,
}

impl PrunerState {
    pub fn new(kind: PrunerKind, model: &MultitaskModel, theta_init: f64, target: f64) -> Self {
        let tied = match kind {
            PrunerKind::Adapmtl => vec![1; model.num_components()],
            PrunerKind::SharedThreshold => vec![model.num_components()],
            _ => Vec::new(),
        };
        let n = tied.len();
        let masks = (kind == PrunerKind::MagnitudeIterative).then(|| {
            model
                .components()
                .map(|c| c.layers.iter().map(|l| vec![true; l.weight.len()]).collect())
                .collect()
        });
        Self {
            kind,
            target_sparsity: target,
            theta_init,
            thetas: vec![theta_init; n],
            alphas: vec![sigmoid(theta_init); n],
            tied,
            masks,
            freeze_triggered: false,
            freeze_epoch: None,
        }
    }

    pub fn num_thresholds(&self) -> usize {
        self.thetas.len()
    }

    pub fn theta_index(&self, component: usize) -> Option<usize> {
        match self.kind {
            PrunerKind::Adapmtl => Some(component),
            PrunerKind::SharedThreshold => Some(0),
            _ => None,
        }
    }

    /// Threshold currently applied to `component`; 0 when thresholds are
    /// inactive or the masks are frozen.
    pub fn alpha(&self, component: usize) -> f64 {
        if self.freeze_triggered {
            return 0.0;
        }
        self.theta_index(component).map_or(0.0, |i| self.alphas[i])
    }

    pub fn is_frozen(&self) -> bool {
        self.freeze_triggered
    }

    /// Effective weights and the indicator masks that gate their gradients.
    pub fn effective(&self, model: &MultitaskModel) -> (EffectiveWeights, Vec<Vec<Mask>>) {
        let mut layers = Vec::with_capacity(model.num_components());
        let mut masks = Vec::with_capacity(model.num_components());
        for (c, comp) in model.components().enumerate() {
            let mut cl = Vec::new();
            let mut cm = Vec::new();
            for (li, layer) in comp.layers.iter().enumerate() {
                let w = layer.weight.values();
                let (vals, mask): (Vec<f64>, Mask) = match (&self.masks, self.theta_index(c)) {
                    (Some(fixed), _) => {
                        let m = &fixed[c][li];
                        (
                            w.iter().zip(m).map(|(x, b)| if *b { *x } else { 0.0 }).collect(),
                            m.clone(),
                        )
                    }
                    (None, Some(i)) => {
                        let a = self.alphas[i];
                        (
                            w.iter().map(|x| soft_threshold_scalar(*x, a)).collect(),
                            w.iter().map(|x| x.abs() > a).collect(),
                        )
                    }
                    (None, None) => (w.to_vec(), vec![true; w.len()]),
                };
                cl.push(Tensor::new(layer.weight.shape().to_vec(), vals).expect("same shape"));
                cm.push(mask);
            }
            layers.push(cl);
            masks.push(cm);
        }
        (EffectiveWeights { layers }, masks)
    }

    /// Applies the masked SGD step to every weight tensor.
    pub fn update_weights(
        &self,
        model: &mut MultitaskModel,
        grads_wrt_s: &[Vec<Vec<f64>>],
        masks: &[Vec<Mask>],
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), PrunerError> {
        for (c, comp) in model.components_mut().enumerate() {
            for (li, layer) in comp.layers.iter_mut().enumerate() {
                weight_grad_update(
                    layer.weight.values_mut(),
                    &grads_wrt_s[c][li],
                    &masks[c][li],
                    lr,
                    weight_decay,
                )?;
            }
        }
        Ok(())
    }

    /// Threshold gradients, one per theta.
    pub fn theta_gradients(
        &self,
        model: &MultitaskModel,
        grads_wrt_s: &[Vec<Vec<f64>>],
        masks: &[Vec<Mask>],
    ) -> Vec<f64> {
        (0..self.thetas.len())
            .map(|i| {
                let tensors = model
                    .components()
                    .enumerate()
                    .filter(|(c, _)| self.theta_index(*c) == Some(i))
                    .flat_map(|(c, comp)| {
                        comp.layers.iter().enumerate().map(move |(li, l)| {
                            (
                                l.weight.values(),
                                grads_wrt_s[c][li].as_slice(),
                                masks[c][li].as_slice(),
                            )
                        })
                    });
                theta_gradient(self.thetas[i], tensors)
            })
            .collect()
    }

    /// Updates every theta and refreshes the alpha cache. No-op once frozen.
    ///
    /// `decay` and `drift` act per component: a theta tied across `k`
    /// components receives `k` times both, just as its loss gradient is the
    /// sum over those components.
    pub fn update_thetas(&mut self, grads: &[f64], lr: f64, decay: f64, drift: f64) {
        if self.freeze_triggered {
            return;
        }
        let params = self.thetas.iter_mut().zip(&mut self.alphas).zip(&self.tied);
        for (((theta, alpha), k), g) in params.zip(grads) {
            let k = *k as f64;
            *theta = theta_grad_update(*theta, *g, lr, k * decay, k * drift);
            *alpha = sigmoid(*theta);
        }
    }

    pub fn measure_sparsity(&self, model: &MultitaskModel, epoch: usize) -> SparsitySnapshot {
        let counts = model
            .components()
            .enumerate()
            .map(|(c, comp)| {
                let mut nnz = 0;
                for (li, layer) in comp.layers.iter().enumerate() {
                    nnz += match &self.masks {
                        Some(m) => m[c][li].iter().filter(|b| **b).count(),
                        None => {
                            let a = self.alpha(c);
                            layer.weight.values().iter().filter(|x| x.abs() > a).count()
                        }
                    };
                }
                (comp.name.clone(), nnz, comp.weight_count())
            })
            .collect();
        SparsitySnapshot::from_counts(epoch, counts)
    }

    /// Freezes the masks once overall sparsity reaches the target.
    /// Returns whether a freeze happened on this call.
    pub fn maybe_freeze(&mut self, model: &mut MultitaskModel, snapshot: &SparsitySnapshot) -> bool {
        if self.freeze_triggered
            || !self.kind.uses_thresholds()
            || snapshot.overall < self.target_sparsity
        {
            return false;
        }
        self.freeze(model, snapshot.epoch);
        true
    }

    /// Fixes the current pattern unconditionally. Surviving weights absorb
    /// their soft-thresholded value so the function is unchanged; pruned
    /// weights become exactly zero.
    pub fn freeze(&mut self, model: &mut MultitaskModel, epoch: usize) {
        if self.freeze_triggered {
            return;
        }
        let (eff, masks) = self.effective(model);
        for (c, comp) in model.components_mut().enumerate() {
            for (li, layer) in comp.layers.iter_mut().enumerate() {
                layer
                    .weight
                    .values_mut()
                    .copy_from_slice(eff.layers[c][li].values());
            }
        }
        self.masks = Some(masks);
        self.freeze_triggered = true;
        self.freeze_epoch = Some(epoch);
    }

    /// Globally prunes the smallest-magnitude surviving weights until
    /// `round(fraction · total_weights)` weights are masked. Ties break by
    /// position (component, layer, index).
    pub fn magnitude_prune(&mut self, model: &mut MultitaskModel, fraction: f64) {
        let masks = self.masks.get_or_insert_with(|| {
            model
                .components()
                .map(|c| c.layers.iter().map(|l| vec![true; l.weight.len()]).collect())
                .collect()
        });
        let total: usize = model.components().map(|c| c.weight_count()).sum();
        let target = (fraction * total as f64).round() as usize;
        let pruned = masks.iter().flatten().flatten().filter(|b| !**b).count();
        if target <= pruned {
            return;
        }
        let mut survivors: Vec<(f64, usize, usize, usize)> = Vec::new();
        for (c, comp) in model.components().enumerate() {
            for (li, layer) in comp.layers.iter().enumerate() {
                for (i, w) in layer.weight.values().iter().enumerate() {
                    if masks[c][li][i] {
                        survivors.push((w.abs(), c, li, i));
                    }
                }
            }
        }
        survivors.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
        for &(_, c, li, i) in survivors.iter().take(target - pruned) {
            masks[c][li][i] = false;
            model.component_mut(c).layers[li].weight.values_mut()[i] = 0.0;
        }
    }
}
