//! Training loop: soft-thresholded forward, weighted multitask loss, masked
//! SGD on the weights, threshold updates, epoch-end weighting refresh and
//! mask freezing.

use std::collections::BTreeMap;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Split, SynthDataset, TaskKind};
use crate::metrics::{flops_estimate, Direction, MetricsError, RunReport, TaskMetric};
use crate::model::{ModelError, MultitaskModel};
use crate::pruner::{PrunerError, PrunerKind, PrunerState, SparsitySnapshot};
use crate::tensor::{LossKind, Tape, Tensor, TensorError};
use crate::weighting::{weighted_total_loss, WeightingError, WeightingState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged in epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },
    #[error("dataset has {dataset} tasks, model has {model} heads")]
    TaskCount { dataset: usize, model: usize },
    #[error("task `{task}`: {reason}")]
    TaskMismatch { task: String, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pruner(#[from] PrunerError),
    #[error(transparent)]
    Weighting(#[from] WeightingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Step decay: `lr · factor^⌊n / interval⌋` at iteration `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrDecay {
    pub factor: f64,
    /// In iterations (minibatch steps).
    pub interval: usize,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self {
            factor: 0.5,
            interval: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: LrDecay,
    /// Threshold learning rate; constant over the run.
    pub lr_theta: f64,
    pub weight_decay: f64,
    pub theta_decay: f64,
    /// Constant upward push on every theta per step, scaled by `lr_theta`.
    pub drift: f64,
    pub theta_init: f64,
    pub target_sparsity: f64,
    pub lambda: f64,
    pub window_capacity: usize,
    /// Epochs with all betas fixed at 1. `None` means 10% of `epochs`.
    pub warmup_epochs: Option<usize>,
    pub seed: u64,
    pub pruner_kind: PrunerKind,
    /// Pruning rounds for `magnitude-iterative`.
    pub magnitude_rounds: usize,
    /// Adaptive loss weighting for the threshold pruners; other kinds
    /// always use unit weights.
    pub adaptive_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            lr: 0.02,
            lr_decay: LrDecay::default(),
            lr_theta: 0.003,
            weight_decay: 1e-4,
            theta_decay: 0.0,
            drift: 1.0,
            theta_init: -20.0,
            target_sparsity: 0.8,
            lambda: 1.0,
            window_capacity: 400,
            warmup_epochs: None,
            seed: 42,
            pruner_kind: PrunerKind::Adapmtl,
            magnitude_rounds: 3,
            adaptive_weighting: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return bad(format!(
                "target_sparsity must lie in [0, 1), got {}",
                self.target_sparsity
            ));
        }
        let rates = [
            ("lr", self.lr),
            ("lr_theta", self.lr_theta),
            ("weight_decay", self.weight_decay),
            ("theta_decay", self.theta_decay),
            ("drift", self.drift),
            ("lambda", self.lambda),
            ("lr_decay.factor", self.lr_decay.factor),
        ];
        for (name, v) in rates {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.lambda == 0.0 || self.lr_decay.factor == 0.0 {
            return bad("lambda and lr_decay.factor must be > 0".into());
        }
        if self.lr_decay.interval == 0 {
            return bad("lr_decay.interval must be >= 1".into());
        }
        if !self.theta_init.is_finite() {
            return bad("theta_init must be finite".into());
        }
        if self.window_capacity < 2 {
            return bad("window_capacity must be >= 2".into());
        }
        if self.pruner_kind == PrunerKind::MagnitudeIterative
            && (self.magnitude_rounds == 0 || self.magnitude_rounds >= self.epochs)
        {
            return bad(format!(
                "magnitude_rounds must be in [1, epochs), got {}",
                self.magnitude_rounds
            ));
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.epochs / 10)
    }

    /// Learning rate at iteration `n`.
    pub fn lr_at(&self, n: u64) -> f64 {
        let k = n / self.lr_decay.interval as u64;
        self.lr * self.lr_decay.factor.powi(k.min(i32::MAX as u64) as i32)
    }

    fn weighting_active(&self) -> bool {
        self.adaptive_weighting && self.pruner_kind.uses_thresholds()
    }

    /// Epoch (0-based) at whose end magnitude round `k` (1-based) prunes,
    /// and the cumulative sparsity reached by it.
    pub fn magnitude_schedule(&self) -> Vec<(usize, f64)> {
        let r = self.magnitude_rounds;
        (1..=r)
            .map(|k| {
                let end = (k * self.epochs / (r + 1)).max(1) - 1;
                (end, self.target_sparsity * k as f64 / r as f64)
            })
            .collect()
    }
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean training loss per task.
    pub train_losses: Vec<f64>,
    pub eval: Vec<TaskMetric>,
    /// Weights in force during the epoch.
    pub betas: Vec<f64>,
    pub sparsity: SparsitySnapshot,
    pub thetas: Vec<f64>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub tasks: Vec<String>,
    pub components: Vec<String>,
    pub epochs: Vec<EpochRecord>,
}

fn csv_string(header: Vec<String>, rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

impl RunLog {
    fn push(&mut self, rec: EpochRecord) {
        debug_assert_eq!(rec.epoch, self.epochs.len());
        self.epochs.push(rec);
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Record of the epoch at whose end the masks froze.
    pub fn freeze_record(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.frozen)
    }

    pub fn losses_csv(&self) -> String {
        let mut header = vec!["epoch".to_string(), "lr".to_string()];
        header.extend(self.tasks.iter().map(|t| format!("loss/{t}")));
        if let Some(e) = self.epochs.first() {
            header.extend(e.eval.iter().map(|m| format!("{}/{}", m.task, m.metric)));
        }
        let rows = self
            .epochs
            .iter()
            .map(|e| {
                let mut r = vec![e.epoch.to_string(), e.lr.to_string()];
                r.extend(e.train_losses.iter().map(f64::to_string));
                r.extend(e.eval.iter().map(|m| m.value.to_string()));
                r
            })
            .collect();
        csv_string(header, rows)
    }

    pub fn betas_csv(&self) -> String {
        let mut header = vec!["epoch".to_string()];
        header.extend(self.tasks.iter().map(|t| format!("beta/{t}")));
        let rows = self
            .epochs
            .iter()
            .map(|e| {
                let mut r = vec![e.epoch.to_string()];
                r.extend(e.betas.iter().map(f64::to_string));
                r
            })
            .collect();
        csv_string(header, rows)
    }

    pub fn sparsity_csv(&self) -> String {
        let mut header = vec!["epoch".to_string(), "overall".to_string(), "frozen".to_string()];
        header.extend(self.components.iter().map(|c| format!("sparsity/{c}")));
        header.extend(self.components.iter().map(|c| format!("nnz/{c}")));
        let n_theta = self.epochs.first().map_or(0, |e| e.thetas.len());
        header.extend((0..n_theta).map(|i| format!("theta/{i}")));
        let rows = self
            .epochs
            .iter()
            .map(|e| {
                let mut r = vec![
                    e.epoch.to_string(),
                    e.sparsity.overall.to_string(),
                    u8::from(e.frozen).to_string(),
                ];
                r.extend(e.sparsity.components.iter().map(|c| c.sparsity.to_string()));
                r.extend(e.sparsity.components.iter().map(|c| c.nnz.to_string()));
                r.extend(e.thetas.iter().map(f64::to_string));
                r
            })
            .collect();
        csv_string(header, rows)
    }
}

/// Evaluation metric of a task kind: L1 error for regression, accuracy for
/// classification, mean cosine similarity for direction tasks.
pub fn eval_metric(kind: TaskKind, pred: &Tensor, target: &Tensor) -> (String, Direction, f64) {
    let (rows, cols) = pred.rows_cols();
    let p = pred.values();
    let y = target.values();
    match kind {
        TaskKind::Regression => {
            let v = p.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
            ("l1".into(), Direction::Lower, v)
        }
        TaskKind::Classification => {
            let hits = p
                .chunks(cols)
                .zip(y)
                .filter(|(row, label)| {
                    let arg = row
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
                    arg == **label as usize
                })
                .count();
            ("accuracy".into(), Direction::Higher, hits as f64 / rows as f64)
        }
        TaskKind::Direction => {
            let v = p
                .chunks(cols)
                .zip(y.chunks(cols))
                .map(|(a, b)| {
                    let dot: f64 = a.iter().zip(b).map(|(x, z)| x * z).sum();
                    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if na == 0.0 || nb == 0.0 {
                        0.0
                    } else {
                        dot / (na * nb)
                    }
                })
                .sum::<f64>()
                / rows as f64;
            ("cosine".into(), Direction::Higher, v)
        }
    }
}

/// Loss value pushed into the weighting window. Negative cosine lies in
/// `[-1, 1]`; shifting by one keeps the window mean a positive level.
fn window_value(kind: LossKind, loss: f64) -> f64 {
    match kind {
        LossKind::NegativeCosine => loss + 1.0,
        _ => loss,
    }
}

/// Full training state; everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: MultitaskModel,
    pub pruner: PrunerState,
    pub weighting: WeightingState,
    /// Next epoch to run.
    pub epoch: usize,
    /// Minibatch steps taken so far.
    pub step: u64,
    pub log: RunLog,
}

fn check_tasks(model: &MultitaskModel, data: &SynthDataset) -> Result<(), TrainError> {
    if model.num_tasks() != data.tasks.len() {
        return Err(TrainError::TaskCount {
            dataset: data.tasks.len(),
            model: model.num_tasks(),
        });
    }
    if model.input_dim() != data.input_dim() {
        return Err(TrainError::TaskMismatch {
            task: "input".into(),
            reason: format!(
                "dataset has {} features, model expects {}",
                data.input_dim(),
                model.input_dim()
            ),
        });
    }
    for (t, spec) in data.tasks.iter().enumerate() {
        let head = &model.heads[t];
        let mismatch = |reason: String| TrainError::TaskMismatch {
            task: spec.name.clone(),
            reason,
        };
        if model.output_dim(t) != spec.output_dim {
            return Err(mismatch(format!(
                "head outputs {}, task has {}",
                model.output_dim(t),
                spec.output_dim
            )));
        }
        if head.loss != spec.kind.loss() {
            return Err(mismatch(format!(
                "head loss {} does not fit a {:?} task",
                head.loss, spec.kind
            )));
        }
    }
    Ok(())
}

/// Derives the shuffle seed of an epoch from the run seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Trainer {
    pub fn new(
        model: MultitaskModel,
        data: &SynthDataset,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        check_tasks(&model, data)?;
        if config.batch_size > data.train.len() {
            return Err(TrainError::Config(format!(
                "batch_size {} exceeds {} training samples",
                config.batch_size,
                data.train.len()
            )));
        }
        let pruner = PrunerState::new(
            config.pruner_kind,
            &model,
            config.theta_init,
            config.target_sparsity,
        );
        let tasks: Vec<String> = data.tasks.iter().map(|t| t.name.clone()).collect();
        let weighting = WeightingState::new(
            &tasks,
            config.window_capacity,
            config.lambda,
            config.warmup(),
        );
        let log = RunLog {
            tasks,
            components: model.components().map(|c| c.name.clone()).collect(),
            epochs: Vec::new(),
        };
        Ok(Self {
            config,
            model,
            pruner,
            weighting,
            epoch: 0,
            step: 0,
            log,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn diverged(&self, reason: impl ToString) -> TrainError {
        TrainError::Divergence {
            epoch: self.epoch,
            reason: reason.to_string(),
        }
    }

    fn map_tensor(&self, e: TensorError) -> TrainError {
        match e {
            TensorError::NonFinite(_) => self.diverged(e),
            other => TrainError::Model(other.into()),
        }
    }

    fn map_model(&self, e: ModelError) -> TrainError {
        match e {
            ModelError::Tensor(t) => self.map_tensor(t),
            other => other.into(),
        }
    }

    /// One minibatch step; returns the per-task losses.
    fn step_batch(
        &mut self,
        x: &Tensor,
        targets: &[Tensor],
        betas: &[f64],
    ) -> Result<Vec<f64>, TrainError> {
        let g = batch_gradients(&self.model, &self.pruner, x, targets, betas)
            .map_err(|e| self.map_model(e))?;
        if g.weights.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(self.diverged("non-finite gradient"));
        }
        let lr = self.config.lr_at(self.step);
        self.pruner.update_weights(
            &mut self.model,
            &g.weights,
            &g.masks,
            lr,
            self.config.weight_decay,
        )?;
        for (comp, grads) in self.model.components_mut().zip(&g.biases) {
            for (layer, gb) in comp.layers.iter_mut().zip(grads) {
                layer
                    .bias
                    .values_mut()
                    .iter_mut()
                    .zip(gb)
                    .for_each(|(b, gi)| *b -= lr * gi);
            }
        }
        if let Some(tg) = &g.thetas {
            self.pruner.update_thetas(
                tg,
                self.config.lr_theta,
                self.config.theta_decay,
                self.config.drift,
            );
        }
        self.step += 1;
        Ok(g.task_losses)
    }

    /// Evaluation metrics on the test split with the current effective
    /// weights.
    pub fn evaluate(&self, data: &SynthDataset) -> Result<Vec<TaskMetric>, TrainError> {
        let (eff, _) = self.pruner.effective(&self.model);
        let batch = data.gather(&data.test);
        let preds = self
            .model
            .forward_all_with(&batch.x, &eff)
            .map_err(|e| self.map_model(e))?;
        Ok(data
            .tasks
            .iter()
            .zip(preds.iter().zip(&batch.targets))
            .map(|(spec, (p, y))| {
                let (metric, direction, value) = eval_metric(spec.kind, p, y);
                TaskMetric {
                    task: spec.name.clone(),
                    metric,
                    direction,
                    value,
                }
            })
            .collect())
    }

    /// Runs one epoch and appends its record to the log.
    pub fn run_epoch(&mut self, data: &SynthDataset) -> Result<&EpochRecord, TrainError> {
        if self.is_done() {
            return Err(TrainError::Config("all epochs already completed".into()));
        }
        let n_tasks = self.model.num_tasks();
        let betas = if self.config.weighting_active() {
            self.weighting.betas.clone()
        } else {
            vec![1.0; n_tasks]
        };
        let batches: Vec<_> = data
            .batches(
                Split::Train,
                self.config.batch_size,
                epoch_seed(self.config.seed, self.epoch),
            )?
            .collect();
        let mut per_batch = Vec::with_capacity(batches.len());
        for b in &batches {
            per_batch.push(self.step_batch(&b.x, &b.targets, &betas)?);
        }
        let lr = self.config.lr_at(self.step.saturating_sub(1));

        for losses in &per_batch {
            for (t, l) in losses.iter().enumerate() {
                let v = window_value(self.model.heads[t].loss, *l);
                self.weighting.push_loss(t, v).map_err(|e| self.diverged(e))?;
            }
        }
        if self.config.weighting_active() {
            let (bp, hp) = (self.model.backbone_params(), self.model.head_params());
            self.weighting.refresh(self.epoch, bp, hp)?;
        }
        let train_losses = (0..n_tasks)
            .map(|t| per_batch.iter().map(|l| l[t]).sum::<f64>() / per_batch.len() as f64)
            .collect();

        if self.config.pruner_kind == PrunerKind::MagnitudeIterative {
            if let Some((_, frac)) = self
                .config
                .magnitude_schedule()
                .into_iter()
                .find(|(e, _)| *e == self.epoch)
            {
                self.pruner.magnitude_prune(&mut self.model, frac);
                info!("epoch {}: magnitude round to sparsity {frac:.4}", self.epoch);
            }
        }
        let snapshot = self.pruner.measure_sparsity(&self.model, self.epoch);
        let froze = self.pruner.maybe_freeze(&mut self.model, &snapshot);
        if froze {
            info!(
                "epoch {}: masks frozen at overall sparsity {:.4}",
                self.epoch, snapshot.overall
            );
        }
        let eval = self.evaluate(data)?;
        debug!(
            "epoch {} lr {lr:.3e} losses {:?} sparsity {:.4}",
            self.epoch, train_losses, snapshot.overall
        );
        let rec = EpochRecord {
            epoch: self.epoch,
            lr,
            train_losses,
            eval,
            betas,
            sparsity: snapshot,
            thetas: self.pruner.thetas.clone(),
            frozen: froze,
        };
        self.log.push(rec);
        self.epoch += 1;
        Ok(self.log.last().expect("just pushed"))
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, data: &SynthDataset) -> Result<(), TrainError> {
        self.run_until(data, self.config.epochs)
    }

    /// Runs until `epoch` epochs are complete (capped at the configured
    /// total).
    pub fn run_until(&mut self, data: &SynthDataset, epoch: usize) -> Result<(), TrainError> {
        let stop = epoch.min(self.config.epochs);
        while self.epoch < stop {
            self.run_epoch(data)?;
        }
        Ok(())
    }

    /// Summary of the run so far; deltas are filled when a dense baseline's
    /// metrics are given.
    pub fn report(&self, baseline: Option<&[TaskMetric]>) -> Result<RunReport, TrainError> {
        let snapshot = self.pruner.measure_sparsity(&self.model, self.epoch.saturating_sub(1));
        let metrics = match self.log.last() {
            Some(e) => e.eval.clone(),
            None => Vec::new(),
        };
        let component_sparsity: BTreeMap<String, f64> = snapshot
            .components
            .iter()
            .map(|c| (c.name.clone(), c.sparsity))
            .collect();
        let mut report = RunReport {
            pruner: self.config.pruner_kind.to_string(),
            seed: self.config.seed,
            target_sparsity: self.config.target_sparsity,
            epochs: self.epoch,
            freeze_epoch: self.pruner.freeze_epoch,
            metrics,
            task_deltas: None,
            overall_delta: None,
            component_sparsity,
            overall_sparsity: snapshot.overall,
            param_count: self.model.total_params(),
            param_counts: self.model.param_counts(),
            flops: flops_estimate(&self.model, &snapshot),
            thetas: self.pruner.thetas.clone(),
        };
        if let Some(b) = baseline {
            report.attach_baseline(b)?;
        }
        Ok(report)
    }
}

/// Gradients of `Σ beta_t · L_t` on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub task_losses: Vec<f64>,
    pub total_loss: f64,
    /// Gradient with respect to the effective weights `S(W, alpha)`, per
    /// component per layer. The raw-weight gradient is this times the mask.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<Vec<f64>>>,
    /// Indicator masks of the forward pass.
    pub masks: Vec<Vec<Vec<bool>>>,
    /// One entry per theta; `None` when thresholds are inactive or frozen.
    pub thetas: Option<Vec<f64>>,
}

impl BatchGradients {
    /// `dL/dW` for the raw weights: the effective-weight gradient gated by
    /// the mask.
    pub fn raw_weight_grads(&self) -> Vec<Vec<Vec<f64>>> {
        self.weights
            .iter()
            .zip(&self.masks)
            .map(|(c, mc)| {
                c.iter()
                    .zip(mc)
                    .map(|(g, m)| g.iter().zip(m).map(|(gi, b)| if *b { *gi } else { 0.0 }).collect())
                    .collect()
            })
            .collect()
    }
}

/// Forward through the effective weights, weighted loss and backward pass.
pub fn batch_gradients(
    model: &MultitaskModel,
    pruner: &PrunerState,
    x: &Tensor,
    targets: &[Tensor],
    betas: &[f64],
) -> Result<BatchGradients, ModelError> {
    let (eff, masks) = pruner.effective(model);
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, &eff);
    let xid = tape.constant(x.clone());
    let features = model.record_backbone(&mut tape, &binding, xid)?;
    let mut loss_ids = Vec::with_capacity(targets.len());
    for (t, target) in targets.iter().enumerate() {
        let pred = model.record_head(&mut tape, &binding, features, t)?;
        let y = tape.constant(target.clone());
        loss_ids.push(tape.loss(model.heads[t].loss, pred, y)?);
    }
    let task_losses: Vec<f64> = loss_ids.iter().map(|id| tape.get(*id).item()).collect();
    let total = weighted_total_loss(&mut tape, betas, &loss_ids).map_err(|e| match e {
        WeightingError::Tensor(t) => ModelError::Tensor(t),
        other => ModelError::Tensor(TensorError::Invalid(other.to_string())),
    })?;
    let total_loss = tape.get(total).item();
    tape.backward(total)?;
    let grads_of = |ids: &Vec<Vec<crate::tensor::TensorId>>| -> Vec<Vec<Vec<f64>>> {
        ids.iter()
            .map(|c| {
                c.iter()
                    .map(|id| tape.grad(*id).expect("bound leaves take gradients").to_vec())
                    .collect()
            })
            .collect()
    };
    let weights = grads_of(&binding.weights);
    let biases = grads_of(&binding.biases);
    let thetas = (pruner.kind.uses_thresholds() && !pruner.is_frozen())
        .then(|| pruner.theta_gradients(model, &weights, &masks));
    Ok(BatchGradients {
        task_losses,
        total_loss,
        weights,
        biases,
        masks,
        thetas,
    })
}

/// `Σ beta_t · L_t` on one batch, computed without a tape.
pub fn batch_loss(
    model: &MultitaskModel,
    pruner: &PrunerState,
    x: &Tensor,
    targets: &[Tensor],
    betas: &[f64],
) -> Result<f64, ModelError> {
    let (eff, _) = pruner.effective(model);
    let preds = model.forward_all_with(x, &eff)?;
    let mut total = 0.0;
    for (t, (p, y)) in preds.iter().zip(targets).enumerate() {
        total += betas[t] * crate::tensor::loss_value(model.heads[t].loss, p, y)?;
    }
    Ok(total)
}

/// Trains `model` on `data` for `config.epochs` epochs.
pub fn train(
    model: MultitaskModel,
    data: &SynthDataset,
    config: TrainConfig,
) -> Result<Trainer, TrainError> {
    let mut t = Trainer::new(model, data, config)?;
    t.run(data)?;
    Ok(t)
}

/// Same loop with a single threshold shared by every component.
pub fn train_baseline_shared_threshold(
    model: MultitaskModel,
    data: &SynthDataset,
    config: TrainConfig,
) -> Result<Trainer, TrainError> {
    train(
        model,
        data,
        TrainConfig {
            pruner_kind: PrunerKind::SharedThreshold,
            ..config
        },
    )
}

/// Iterative global magnitude pruning: `magnitude_rounds` train-then-prune
/// rounds up to `target_sparsity`, then fine-tuning with hard masks.
pub fn train_baseline_magnitude(
    model: MultitaskModel,
    data: &SynthDataset,
    config: TrainConfig,
) -> Result<Trainer, TrainError> {
    train(
        model,
        data,
        TrainConfig {
            pruner_kind: PrunerKind::MagnitudeIterative,
            ..config
        },
    )
}

/// Model spec for `tasks`: the given backbone widths, then one head per
/// task with hidden width `head_hidden[t]` and the task's output width.
pub fn spec_for_tasks(
    backbone: Vec<usize>,
    head_hidden: &[usize],
    tasks: &[crate::data::TaskSpec],
) -> crate::model::ModelSpec {
    let trunk = *backbone.last().expect("non-empty backbone");
    crate::model::ModelSpec {
        backbone,
        heads: tasks
            .iter()
            .zip(head_hidden)
            .map(|(t, h)| crate::model::HeadSpec {
                name: t.name.clone(),
                widths: vec![trunk, *h, t.output_dim],
                loss: t.kind.loss(),
            })
            .collect(),
    }
}
