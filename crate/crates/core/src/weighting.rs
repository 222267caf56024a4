//! Adaptive task-loss weighting from sliding loss windows.
//!
//! For each task `t`, `r_t = mad(window_t) / L_t` where `L_t` is the window
//! mean. Normalizing by the mean ratio gives `n_t = r_t / mean(r)`, and
//! `beta_t = (1 / n_t) · lambda · |W_backbone| / Σ |W_head|`. Tasks whose loss
//! is stable relative to its level get larger weights.

use std::collections::VecDeque;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, TensorError, TensorId};

/// Denominator floor for `L_t`.
pub const MIN_LOSS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum WeightingError {
    #[error("task `{task}` produced a non-finite loss ({value}); training diverged")]
    Divergence { task: String, value: f64 },
    #[error("window for `{0}` holds fewer than 2 values")]
    InsufficientData(String),
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("unknown task index {0}")]
    UnknownTask(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ring buffer of the most recent loss values of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWindow {
    pub task: String,
    pub capacity: usize,
    buffer: VecDeque<f64>,
    count: u64,
}

impl LossWindow {
    pub fn new(task: impl Into<String>, capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            task: task.into(),
            capacity,
            buffer: VecDeque::with_capacity(capacity),
            count: 0,
        }
    }

    pub fn push(&mut self, loss: f64) -> Result<(), WeightingError> {
        if !loss.is_finite() {
            return Err(WeightingError::Divergence {
                task: self.task.clone(),
                value: loss,
            });
        }
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(loss);
        self.count += 1;
        Ok(())
    }

    /// Total values ever pushed.
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.buffer.iter().copied()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.values().sum::<f64>() / self.len() as f64)
    }

    /// Mean absolute deviation from the window mean.
    pub fn avg_deviation(&self) -> Result<f64, WeightingError> {
        if self.len() < 2 {
            return Err(WeightingError::InsufficientData(self.task.clone()));
        }
        let m = self.mean().unwrap();
        Ok(self.values().map(|v| (v - m).abs()).sum::<f64>() / self.len() as f64)
    }
}

/// Applies the weighting formula to per-task deviations and loss levels.
pub fn betas_from_stats(deviations: &[f64], levels: &[f64], scale: f64) -> Vec<f64> {
    let ratios: Vec<f64> = deviations
        .iter()
        .zip(levels)
        .map(|(d, l)| d / l.max(MIN_LOSS))
        .collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    if mean <= 0.0 {
        // every window is flat: no task is more stable than another
        return vec![scale; ratios.len()];
    }
    ratios
        .iter()
        .map(|r| {
            let n = r / mean;
            // a perfectly flat window among noisy ones gets the largest
            // finite weight the others allow
            if n > 0.0 {
                scale / n
            } else {
                scale * ratios.len() as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightingState {
    pub windows: Vec<LossWindow>,
    pub lambda: f64,
    pub warmup_epochs: usize,
    pub betas: Vec<f64>,
    /// Carried for completeness; no loss term uses it.
    pub beta_backbone: f64,
}

impl WeightingState {
    pub fn new(tasks: &[String], capacity: usize, lambda: f64, warmup_epochs: usize) -> Self {
        Self {
            windows: tasks.iter().map(|t| LossWindow::new(t.clone(), capacity)).collect(),
            lambda,
            warmup_epochs,
            betas: vec![1.0; tasks.len()],
            beta_backbone: 1.0,
        }
    }

    pub fn push_loss(&mut self, task: usize, loss: f64) -> Result<(), WeightingError> {
        self.windows
            .get_mut(task)
            .ok_or(WeightingError::UnknownTask(task))?
            .push(loss)
    }

    /// Computes betas from explicit current loss levels. Returns all ones
    /// while `epoch < warmup_epochs`.
    pub fn compute_betas(
        &self,
        epoch: usize,
        current_losses: &[f64],
        backbone_params: usize,
        head_params: usize,
    ) -> Result<Vec<f64>, WeightingError> {
        let t = self.windows.len();
        if current_losses.len() != t {
            return Err(WeightingError::Length {
                expected: t,
                got: current_losses.len(),
            });
        }
        if epoch < self.warmup_epochs {
            return Ok(vec![1.0; t]);
        }
        let deviations = self
            .windows
            .iter()
            .map(LossWindow::avg_deviation)
            .collect::<Result<Vec<_>, _>>()?;
        for (w, l) in self.windows.iter().zip(current_losses) {
            if *l <= MIN_LOSS {
                warn!("loss level {l} of `{}` clamped to {MIN_LOSS}", w.task);
            }
        }
        let scale = self.lambda * backbone_params as f64 / head_params as f64;
        Ok(betas_from_stats(&deviations, current_losses, scale))
    }

    /// Epoch-end refresh using each window's mean as the loss level. Keeps
    /// the previous betas when a window is too short.
    pub fn refresh(
        &mut self,
        epoch: usize,
        backbone_params: usize,
        head_params: usize,
    ) -> Result<&[f64], WeightingError> {
        let levels: Vec<f64> = self
            .windows
            .iter()
            .map(|w| w.mean().unwrap_or(0.0))
            .collect();
        match self.compute_betas(epoch, &levels, backbone_params, head_params) {
            Ok(b) => self.betas = b,
            Err(WeightingError::InsufficientData(_)) => {}
            Err(e) => return Err(e),
        }
        Ok(&self.betas)
    }
}

/// `Σ beta_t · L_t` with the betas as tape constants.
pub fn weighted_total_loss(
    tape: &mut Tape,
    betas: &[f64],
    losses: &[TensorId],
) -> Result<TensorId, WeightingError> {
    if betas.len() != losses.len() {
        return Err(WeightingError::Length {
            expected: losses.len(),
            got: betas.len(),
        });
    }
    let terms: Vec<(TensorId, f64)> = losses.iter().copied().zip(betas.iter().copied()).collect();
    Ok(tape.weighted_sum(&terms)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn ring_semantics() {
        let mut w = LossWindow::new("a", 3);
        for v in [1.0, 2.0, 3.0, 4.0] {
            w.push(v).unwrap();
        }
        assert_eq!(w.values().collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
        assert_eq!(w.count(), 4);
        assert!(matches!(
            w.push(f64::NAN),
            Err(WeightingError::Divergence { .. })
        ));
    }

    #[test]
    fn capacity_clamp() {
        let mut w = LossWindow::new("a", 400);
        for i in 0..500 {
            w.push(i as f64).unwrap();
        }
        assert_eq!(w.len(), 400);
        assert_eq!(w.count(), 500);
        assert_eq!(w.mean().unwrap(), (100..500).sum::<i32>() as f64 / 400.0);
    }

    #[test]
    fn avg_deviation_examples() {
        let mad = |v: &[f64]| {
            let mut w = LossWindow::new("a", 10);
            v.iter().for_each(|x| w.push(*x).unwrap());
            w.avg_deviation()
        };
        assert_eq!(mad(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(mad(&[0.0, 2.0]).unwrap(), 1.0);
        assert!((mad(&[1.0, 2.0, 3.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(mad(&[1.0]), Err(WeightingError::InsufficientData(_))));
    }

    #[test]
    fn worked_example() {
        // r = {0.5, 1.5}: n = {0.5, 1.5}, beta = {2, 2/3} with scale 1
        let b = betas_from_stats(&[0.5, 1.5], &[1.0, 1.0], 1.0);
        assert!((b[0] - 2.0).abs() < 1e-12);
        assert!((b[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_ratios_give_equal_betas() {
        let b = betas_from_stats(&[0.2, 0.4, 0.6], &[1.0, 2.0, 3.0], 1.7);
        for x in b {
            assert!((x - 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn warmup_is_exactly_one() {
        let mut s = WeightingState::new(&["a".into(), "b".into()], 5, 3.0, 10);
        for i in 0..5 {
            s.push_loss(0, 1.0 + i as f64).unwrap();
            s.push_loss(1, 2.0).unwrap();
        }
        for epoch in 0..10 {
            assert_eq!(s.refresh(epoch, 100, 50).unwrap(), &[1.0, 1.0]);
        }
        assert_ne!(s.refresh(10, 100, 50).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn weighted_loss_is_linear_in_betas() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(3.0));
        let b = tape.param(Tensor::scalar(5.0));
        let total = weighted_total_loss(&mut tape, &[2.0, 0.0], &[a, b]).unwrap();
        assert_eq!(tape.value(total), &[6.0]);
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0]);
        assert!(matches!(
            weighted_total_loss(&mut tape, &[1.0], &[a, b]),
            Err(WeightingError::Length { .. })
        ));
    }
}
