//! Shared-backbone multitask MLP.
//!
//! The parameters are partitioned into components: one backbone and one
//! head per task. Every hidden layer uses ReLU; each head's last layer is
//! linear. Heads branch from the final backbone layer.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{matmul_values, LossKind, Tape, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model needs at least one head")]
    NoHeads,
    #[error("{0}: layer widths must list at least an input and an output, all >= 1")]
    BadWidths(String),
    #[error("head `{head}` expects input width {got}, backbone produces {expected}")]
    HeadInputMismatch {
        head: String,
        expected: usize,
        got: usize,
    },
    #[error("task index {index} out of range for {tasks} tasks")]
    TaskOutOfRange { index: usize, tasks: usize },
    #[error("input has {got} features, model expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("duplicate head name `{0}`")]
    DuplicateHead(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub name: String,
    /// Widths from the head input (= backbone output) to the task output.
    pub widths: Vec<usize>,
    pub loss: LossKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Widths from the model input to the shared representation, e.g.
    /// `[16, 32, 32]` is two layers 16→32→32.
    pub backbone: Vec<usize>,
    pub heads: Vec<HeadSpec>,
}

impl ModelSpec {
    pub fn input_dim(&self) -> usize {
        self.backbone[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[in, out]`, applied as `x · W + b`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], values).expect("positive widths"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// A disjoint parameter group: the backbone or one task head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub layers: Vec<Linear>,
}

impl Component {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub component: Component,
    pub loss: LossKind,
}

/// Effective weight matrices, one per layer per component, in the order
/// `[backbone, head 0, head 1, ...]`. Biases always come from the model.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveWeights {
    pub layers: Vec<Vec<Tensor>>,
}

impl EffectiveWeights {
    pub fn component(&self, c: usize) -> &[Tensor] {
        &self.layers[c]
    }
}

/// Tape handles for one bound forward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    pub weights: Vec<Vec<TensorId>>,
    pub biases: Vec<Vec<TensorId>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MultitaskModel {
    pub spec: ModelSpec,
    pub backbone: Component,
    pub heads: Vec<Head>,
    #[serde(skip)]
    raw_forward_calls: AtomicU64,
}

impl Clone for MultitaskModel {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            backbone: self.backbone.clone(),
            heads: self.heads.clone(),
            raw_forward_calls: AtomicU64::new(self.raw_forward_calls()),
        }
    }
}

impl PartialEq for MultitaskModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.backbone == other.backbone && self.heads == other.heads
    }
}

fn check_widths(what: &str, widths: &[usize]) -> Result<(), ModelError> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(ModelError::BadWidths(what.to_string()));
    }
    Ok(())
}

fn build_component(name: String, widths: &[usize], rng: &mut ChaCha8Rng) -> Component {
    let layers = widths
        .windows(2)
        .map(|w| Linear::glorot(w[0], w[1], rng))
        .collect();
    Component { name, layers }
}

pub const BACKBONE: &str = "backbone";

impl MultitaskModel {
    /// Builds a model with Glorot-uniform weights and zero biases.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self, ModelError> {
        if spec.heads.is_empty() {
            return Err(ModelError::NoHeads);
        }
        check_widths(BACKBONE, &spec.backbone)?;
        let trunk_out = *spec.backbone.last().unwrap();
        let mut names = std::collections::HashSet::new();
        for h in &spec.heads {
            check_widths(&h.name, &h.widths)?;
            if h.widths[0] != trunk_out {
                return Err(ModelError::HeadInputMismatch {
                    head: h.name.clone(),
                    expected: trunk_out,
                    got: h.widths[0],
                });
            }
            if !names.insert(h.name.as_str()) {
                return Err(ModelError::DuplicateHead(h.name.clone()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = build_component(BACKBONE.to_string(), &spec.backbone, &mut rng);
        let heads = spec
            .heads
            .iter()
            .map(|h| Head {
                component: build_component(format!("head:{}", h.name), &h.widths, &mut rng),
                loss: h.loss,
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            backbone,
            heads,
            raw_forward_calls: AtomicU64::new(0),
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.layers[0].fan_in()
    }

    pub fn output_dim(&self, task: usize) -> usize {
        self.heads[task].component.layers.last().unwrap().fan_out()
    }

    /// Components in canonical order: backbone first, then heads.
    pub fn components(&self) -> impl Iterator<Item = &Component> {
        std::iter::once(&self.backbone).chain(self.heads.iter().map(|h| &h.component))
    }

    pub fn components_mut(&mut self) -> impl Iterator<Item = &mut Component> {
        std::iter::once(&mut self.backbone).chain(self.heads.iter_mut().map(|h| &mut h.component))
    }

    pub fn component(&self, c: usize) -> &Component {
        if c == 0 {
            &self.backbone
        } else {
            &self.heads[c - 1].component
        }
    }

    pub fn component_mut(&mut self, c: usize) -> &mut Component {
        if c == 0 {
            &mut self.backbone
        } else {
            &mut self.heads[c - 1].component
        }
    }

    pub fn num_components(&self) -> usize {
        self.heads.len() + 1
    }

    pub fn param_counts(&self) -> BTreeMap<String, usize> {
        self.components()
            .map(|c| (c.name.clone(), c.param_count()))
            .collect()
    }

    pub fn total_params(&self) -> usize {
        self.components().map(Component::param_count).sum()
    }

    pub fn backbone_params(&self) -> usize {
        self.backbone.param_count()
    }

    pub fn head_params(&self) -> usize {
        self.heads.iter().map(|h| h.component.param_count()).sum()
    }

    /// Raw weights as effective weights (no pruning).
    pub fn raw_weights(&self) -> EffectiveWeights {
        EffectiveWeights {
            layers: self
                .components()
                .map(|c| c.layers.iter().map(|l| l.weight.clone()).collect())
                .collect(),
        }
    }

    /// Number of forward passes that used raw (unthresholded) weights.
    pub fn raw_forward_calls(&self) -> u64 {
        self.raw_forward_calls.load(Ordering::Relaxed)
    }

    fn check_input(&self, x: &Tensor, task: usize) -> Result<(), ModelError> {
        if task >= self.num_tasks() {
            return Err(ModelError::TaskOutOfRange {
                index: task,
                tasks: self.num_tasks(),
            });
        }
        let (_, cols) = x.rows_cols();
        if cols != self.input_dim() {
            return Err(ModelError::InputWidth {
                expected: self.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    /// Forward pass with the raw weights. Counted by [`Self::raw_forward_calls`].
    pub fn forward_task(&self, x: &Tensor, task: usize) -> Result<Tensor, ModelError> {
        self.raw_forward_calls.fetch_add(1, Ordering::Relaxed);
        self.forward_with(x, task, &self.raw_weights())
    }

    fn dense_layer(
        layer: &Linear,
        w: &Tensor,
        h: &[f64],
        rows: usize,
        relu: bool,
    ) -> Vec<f64> {
        let (k, n) = (layer.fan_in(), layer.fan_out());
        let mut out = matmul_values(h, w.values(), rows, k, n);
        for row in out.chunks_mut(n) {
            row.iter_mut()
                .zip(layer.bias.values())
                .for_each(|(o, b)| *o += b);
        }
        if relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        out
    }

    fn backbone_with(&self, x: &Tensor, weights: &EffectiveWeights) -> Vec<f64> {
        let (rows, _) = x.rows_cols();
        let mut h = x.values().to_vec();
        for (li, layer) in self.backbone.layers.iter().enumerate() {
            h = Self::dense_layer(layer, &weights.layers[0][li], &h, rows, true);
        }
        h
    }

    fn head_with(
        &self,
        features: &[f64],
        rows: usize,
        task: usize,
        weights: &EffectiveWeights,
    ) -> Result<Tensor, ModelError> {
        let layers = &self.heads[task].component.layers;
        let mut h = features.to_vec();
        for (li, layer) in layers.iter().enumerate() {
            let w = &weights.layers[task + 1][li];
            h = Self::dense_layer(layer, w, &h, rows, li + 1 < layers.len());
        }
        if !h.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite("forward").into());
        }
        Ok(Tensor::new(vec![rows, self.output_dim(task)], h)?)
    }

    /// Forward pass of `task` using the given effective weights, without
    /// recording a tape. `x` is `[batch, input_dim]` or a single row.
    pub fn forward_with(
        &self,
        x: &Tensor,
        task: usize,
        weights: &EffectiveWeights,
    ) -> Result<Tensor, ModelError> {
        self.check_input(x, task)?;
        let features = self.backbone_with(x, weights);
        self.head_with(&features, x.rows_cols().0, task, weights)
    }

    /// Every task's prediction from a single backbone pass.
    pub fn forward_all_with(
        &self,
        x: &Tensor,
        weights: &EffectiveWeights,
    ) -> Result<Vec<Tensor>, ModelError> {
        self.check_input(x, 0)?;
        let features = self.backbone_with(x, weights);
        (0..self.num_tasks())
            .map(|t| self.head_with(&features, x.rows_cols().0, t, weights))
            .collect()
    }

    /// Places effective weights and biases on `tape` as gradient leaves.
    pub fn bind(&self, tape: &mut Tape, weights: &EffectiveWeights) -> Binding {
        let mut wid = Vec::new();
        let mut bid = Vec::new();
        for (c, comp) in self.components().enumerate() {
            wid.push(
                weights.layers[c]
                    .iter()
                    .map(|w| tape.param(w.clone()))
                    .collect(),
            );
            bid.push(
                comp.layers
                    .iter()
                    .map(|l| tape.param(l.bias.clone()))
                    .collect(),
            );
        }
        Binding {
            weights: wid,
            biases: bid,
        }
    }

    /// Records the backbone layers on the tape; returns the shared features.
    pub fn record_backbone(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: TensorId,
    ) -> Result<TensorId, ModelError> {
        let mut h = x;
        for li in 0..self.backbone.layers.len() {
            let z = tape.matmul(h, binding.weights[0][li])?;
            let z = tape.add_bias(z, binding.biases[0][li])?;
            h = tape.relu(z)?;
        }
        Ok(h)
    }

    /// Records head `task` on top of shared `features`.
    pub fn record_head(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        features: TensorId,
        task: usize,
    ) -> Result<TensorId, ModelError> {
        if task >= self.num_tasks() {
            return Err(ModelError::TaskOutOfRange {
                index: task,
                tasks: self.num_tasks(),
            });
        }
        let c = task + 1;
        let nl = self.heads[task].component.layers.len();
        let mut h = features;
        for li in 0..nl {
            let z = tape.matmul(h, binding.weights[c][li])?;
            h = tape.add_bias(z, binding.biases[c][li])?;
            if li + 1 < nl {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec() -> ModelSpec {
        ModelSpec {
            backbone: vec![4, 8],
            heads: vec![
                HeadSpec {
                    name: "a".into(),
                    widths: vec![8, 2],
                    loss: LossKind::L1,
                },
                HeadSpec {
                    name: "b".into(),
                    widths: vec![8, 1],
                    loss: LossKind::MeanSquaredError,
                },
            ],
        }
    }

    #[test]
    fn param_counts_by_hand() {
        let m = MultitaskModel::build(&small_spec(), 1).unwrap();
        assert_eq!(m.num_components(), 3);
        assert_eq!(m.total_params(), 67);
        let counts = m.param_counts();
        assert_eq!(counts["backbone"], 40);
        assert_eq!(counts["head:a"], 18);
        assert_eq!(counts["head:b"], 9);
    }

    #[test]
    fn single_task_single_layer_head() {
        let spec = ModelSpec {
            backbone: vec![3, 5],
            heads: vec![HeadSpec {
                name: "only".into(),
                widths: vec![5, 1],
                loss: LossKind::L1,
            }],
        };
        let m = MultitaskModel::build(&spec, 0).unwrap();
        assert_eq!(m.num_tasks(), 1);
        assert_eq!(m.param_counts()["head:only"], 5 + 1);
    }

    #[test]
    fn build_errors() {
        let mut spec = small_spec();
        spec.heads[1].widths = vec![7, 1];
        assert!(matches!(
            MultitaskModel::build(&spec, 0),
            Err(ModelError::HeadInputMismatch { expected: 8, got: 7, .. })
        ));
        let mut spec = small_spec();
        spec.heads.clear();
        assert!(matches!(MultitaskModel::build(&spec, 0), Err(ModelError::NoHeads)));
        let mut spec = small_spec();
        spec.backbone = vec![4, 0];
        assert!(matches!(MultitaskModel::build(&spec, 0), Err(ModelError::BadWidths(_))));
        let mut spec = small_spec();
        spec.heads[1].name = "a".into();
        assert!(matches!(MultitaskModel::build(&spec, 0), Err(ModelError::DuplicateHead(_))));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut m = MultitaskModel::build(&small_spec(), 3).unwrap();
        for c in m.components_mut() {
            for l in &mut c.layers {
                l.weight.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = Tensor::vector(vec![0.3, -1.0, 2.0, 0.5]);
        let y = m.forward_task(&x, 0).unwrap();
        assert_eq!(y.values(), &[0.0, 0.0]);
    }

    #[test]
    fn forward_matches_straight_line_arithmetic() {
        let m = MultitaskModel::build(&small_spec(), 11).unwrap();
        let x = [1.0, 0.0, 0.0, 0.0];
        // hidden = relu(x · W0 + b0), out = hidden · W1 + b1
        let w0 = m.backbone.layers[0].weight.values();
        let mut hidden = [0.0; 8];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut s = 0.0;
            for (i, xi) in x.iter().enumerate() {
                s += xi * w0[i * 8 + j];
            }
            *h = f64::max(s, 0.0);
        }
        let w1 = m.heads[0].component.layers[0].weight.values();
        let mut expect = [0.0; 2];
        for (k, e) in expect.iter_mut().enumerate() {
            for (j, h) in hidden.iter().enumerate() {
                *e += h * w1[j * 2 + k];
            }
        }
        let y = m.forward_task(&Tensor::vector(x.to_vec()), 0).unwrap();
        for (a, b) in y.values().iter().zip(expect) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn tape_forward_agrees_with_direct_forward() {
        let m = MultitaskModel::build(&small_spec(), 5).unwrap();
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let mut tape = Tape::new();
        let w = m.raw_weights();
        let b = m.bind(&mut tape, &w);
        let xid = tape.constant(x.clone());
        let f = m.record_backbone(&mut tape, &b, xid).unwrap();
        for t in 0..2 {
            let y = m.record_head(&mut tape, &b, f, t).unwrap();
            assert_eq!(tape.value(y), m.forward_with(&x, t, &w).unwrap().values());
        }
    }

    #[test]
    fn task_out_of_range() {
        let m = MultitaskModel::build(&small_spec(), 0).unwrap();
        let x = Tensor::vector(vec![0.0; 4]);
        assert!(matches!(
            m.forward_task(&x, 2),
            Err(ModelError::TaskOutOfRange { index: 2, tasks: 2 })
        ));
    }

    #[test]
    fn head_isolation_and_backbone_sharing() {
        let m = MultitaskModel::build(&small_spec(), 9).unwrap();
        let x = Tensor::vector(vec![0.4, -0.2, 1.1, 0.7]);
        let before: Vec<_> = (0..2).map(|t| m.forward_task(&x, t).unwrap()).collect();

        let mut head_perturbed = m.clone();
        head_perturbed.heads[1].component.layers[0].weight.values_mut()[0] += 0.5;
        head_perturbed.heads[1].component.layers[0].bias.values_mut()[0] += 0.5;
        assert_eq!(head_perturbed.forward_task(&x, 0).unwrap(), before[0]);
        assert_ne!(head_perturbed.forward_task(&x, 1).unwrap(), before[1]);

        let mut trunk_perturbed = m.clone();
        trunk_perturbed.backbone.layers[0]
            .bias
            .values_mut()
            .iter_mut()
            .for_each(|b| *b += 0.3);
        for (t, b) in before.iter().enumerate() {
            assert_ne!(&trunk_perturbed.forward_task(&x, t).unwrap(), b);
        }
    }
}
