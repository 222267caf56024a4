//! Normalized relative performance against a dense baseline, and FLOP
//! accounting from nonzero counts.
//!
//! For a task with metric set `M`, the per-metric change is
//! `(-1)^l_j · (M_j − M_dense_j) / M_dense_j · 100`, where `l_j` is 1 for
//! lower-is-better metrics. [`Convention::Mean`] averages the changes over
//! `|M|`; [`Convention::Sum`] adds them, which is how published tables are
//! usually tabulated. The overall score is the mean over tasks.

use std::collections::BTreeMap;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::MultitaskModel;
use crate::pruner::SparsitySnapshot;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("row `{row}` has no metric `{metric}`")]
    MissingMetric { row: String, metric: String },
    #[error("unknown row `{0}`")]
    MissingRow(String),
    #[error("baseline value of `{0}` is zero")]
    ZeroBaseline(String),
    #[error("no task deltas to average")]
    Empty,
    #[error("malformed table: {0}")]
    Malformed(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    Mean,
    #[default]
    Sum,
}

impl FromStr for Convention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            other => Err(format!("unknown convention `{other}` (mean|sum)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Lower,
    Higher,
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lower" => Ok(Self::Lower),
            "higher" => Ok(Self::Higher),
            other => Err(format!("unknown direction `{other}` (lower|higher)")),
        }
    }
}

/// Metric values per model row, with a direction per metric.
///
/// Metric names of the form `task/metric` are grouped by their `task`
/// prefix; names without a slash form a task of their own.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricTable {
    pub metrics: Vec<String>,
    pub directions: Vec<Direction>,
    /// Row order as read.
    pub rows: Vec<(String, Vec<f64>)>,
}

impl MetricTable {
    pub fn new(metrics: Vec<(String, Direction)>) -> Self {
        let (metrics, directions) = metrics.into_iter().unzip();
        Self {
            metrics,
            directions,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<(), MetricsError> {
        let name = name.into();
        if values.len() != self.metrics.len() {
            return Err(MetricsError::Malformed(format!(
                "row `{name}` has {} values for {} metrics",
                values.len(),
                self.metrics.len()
            )));
        }
        self.rows.push((name, values));
        Ok(())
    }

    pub fn row(&self, name: &str) -> Result<&[f64], MetricsError> {
        self.rows
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| MetricsError::MissingRow(name.to_string()))
    }

    fn metric_index(&self, row: &str, metric: &str) -> Result<usize, MetricsError> {
        self.metrics
            .iter()
            .position(|m| m == metric)
            .ok_or_else(|| MetricsError::MissingMetric {
                row: row.to_string(),
                metric: metric.to_string(),
            })
    }

    /// Task names in first-appearance order with their metric names.
    pub fn tasks(&self) -> Vec<(String, Vec<String>)> {
        let mut out: Vec<(String, Vec<String>)> = Vec::new();
        for m in &self.metrics {
            let task = m.split_once('/').map_or(m.as_str(), |(t, _)| t).to_string();
            match out.iter_mut().find(|(t, _)| *t == task) {
                Some((_, ms)) => ms.push(m.clone()),
                None => out.push((task, vec![m.clone()])),
            }
        }
        out
    }

    /// Reads the CSV layout: a header `<key>,<metric>...`, an optional
    /// directions row whose first cell is `direction`, then one row per
    /// model keyed by its first cell. Without a directions row every metric
    /// is taken as lower-is-better, which suits loss logs.
    pub fn from_csv(reader: impl Read) -> Result<Self, MetricsError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.len() < 2 {
            return Err(MetricsError::Malformed("need a model column and >= 1 metric".into()));
        }
        let metrics: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut records = rdr.records().peekable();
        let has_dirs = match records.peek() {
            Some(Ok(r)) => r.get(0).is_some_and(|c| c.eq_ignore_ascii_case("direction")),
            _ => false,
        };
        let directions = if has_dirs {
            let dir_row = records.next().expect("peeked")?;
            dir_row
                .iter()
                .skip(1)
                .map(Direction::from_str)
                .collect::<Result<Vec<_>, _>>()
                .map_err(MetricsError::Malformed)?
        } else {
            vec![Direction::Lower; metrics.len()]
        };
        if directions.len() != metrics.len() {
            return Err(MetricsError::Malformed("directions row length".into()));
        }
        let mut table = Self::new(metrics.into_iter().zip(directions).collect());
        for rec in records {
            let rec = rec?;
            let name = rec.get(0).unwrap_or_default().to_string();
            let values = rec
                .iter()
                .skip(1)
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| MetricsError::Malformed(format!("row `{name}`: bad number `{c}`")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            table.push_row(name, values)?;
        }
        Ok(table)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model");
        for m in &self.metrics {
            s.push(',');
            s.push_str(m);
        }
        s.push_str("\ndirection");
        for d in &self.directions {
            s.push_str(match d {
                Direction::Lower => ",lower",
                Direction::Higher => ",higher",
            });
        }
        s.push('\n');
        for (name, vals) in &self.rows {
            s.push_str(name);
            for v in vals {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Signed percentage change of one task's metrics relative to `baseline`.
pub fn delta_task(
    table: &MetricTable,
    baseline: &str,
    model_row: &str,
    task_metrics: &[String],
    convention: Convention,
) -> Result<f64, MetricsError> {
    if task_metrics.is_empty() {
        return Err(MetricsError::Empty);
    }
    let base = table.row(baseline)?;
    let row = table.row(model_row)?;
    let mut total = 0.0;
    for m in task_metrics {
        let j = table.metric_index(model_row, m)?;
        if base[j] == 0.0 {
            return Err(MetricsError::ZeroBaseline(m.clone()));
        }
        let change = (row[j] - base[j]) / base[j] * 100.0;
        total += match table.directions[j] {
            Direction::Lower => -change,
            Direction::Higher => change,
        };
    }
    Ok(match convention {
        Convention::Sum => total,
        Convention::Mean => total / task_metrics.len() as f64,
    })
}

pub fn delta_overall(per_task: &[f64]) -> Result<f64, MetricsError> {
    if per_task.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDeltas {
    pub model: String,
    pub tasks: Vec<(String, f64)>,
    pub overall: f64,
}

/// Per-task and overall deltas for every row of the table.
pub fn table_deltas(
    table: &MetricTable,
    baseline: &str,
    convention: Convention,
) -> Result<Vec<RowDeltas>, MetricsError> {
    table.row(baseline)?;
    let tasks = table.tasks();
    table
        .rows
        .iter()
        .map(|(name, _)| {
            let per: Vec<(String, f64)> = tasks
                .iter()
                .map(|(t, ms)| Ok((t.clone(), delta_task(table, baseline, name, ms, convention)?)))
                .collect::<Result<_, MetricsError>>()?;
            let vals: Vec<f64> = per.iter().map(|(_, v)| *v).collect();
            Ok(RowDeltas {
                model: name.clone(),
                overall: delta_overall(&vals)?,
                tasks: per,
            })
        })
        .collect()
}

/// FLOPs per sample, counting 2 FLOPs per multiply-add; biases excluded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopEstimate {
    pub dense_flops: u64,
    pub sparse_flops: u64,
}

impl FlopEstimate {
    pub fn ratio(&self) -> f64 {
        self.sparse_flops as f64 / self.dense_flops as f64
    }
}

/// Whole-model estimate: backbone once plus every head.
pub fn flops_estimate(model: &MultitaskModel, snapshot: &SparsitySnapshot) -> FlopEstimate {
    let dense: usize = model.components().map(|c| c.weight_count()).sum();
    FlopEstimate {
        dense_flops: 2 * dense as u64,
        sparse_flops: 2 * snapshot.total_nnz() as u64,
    }
}

/// Estimate along one task's path (backbone plus that head).
pub fn path_flops_estimate(
    model: &MultitaskModel,
    snapshot: &SparsitySnapshot,
    task: usize,
) -> FlopEstimate {
    let comps = [0, task + 1];
    FlopEstimate {
        dense_flops: comps
            .iter()
            .map(|&c| 2 * model.component(c).weight_count() as u64)
            .sum(),
        sparse_flops: comps
            .iter()
            .map(|&c| 2 * snapshot.components[c].nnz as u64)
            .sum(),
    }
}

/// Evaluation metric of one task and its direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task: String,
    pub metric: String,
    pub direction: Direction,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub pruner: String,
    pub seed: u64,
    pub target_sparsity: f64,
    pub epochs: usize,
    pub freeze_epoch: Option<usize>,
    pub metrics: Vec<TaskMetric>,
    /// Per-task delta against the dense baseline, when one is available.
    pub task_deltas: Option<Vec<(String, f64)>>,
    pub overall_delta: Option<f64>,
    pub component_sparsity: BTreeMap<String, f64>,
    pub overall_sparsity: f64,
    pub param_count: usize,
    pub param_counts: BTreeMap<String, usize>,
    pub flops: FlopEstimate,
    pub thetas: Vec<f64>,
}

impl RunReport {
    /// Fills the delta fields against `baseline` metrics (one metric per
    /// task, so both conventions agree).
    pub fn attach_baseline(&mut self, baseline: &[TaskMetric]) -> Result<(), MetricsError> {
        let deltas = delta_against(&self.metrics, baseline)?;
        let vals: Vec<f64> = deltas.iter().map(|(_, v)| *v).collect();
        self.overall_delta = Some(delta_overall(&vals)?);
        self.task_deltas = Some(deltas);
        Ok(())
    }
}

/// Per-task deltas of `metrics` against `baseline`, matched by task name.
pub fn delta_against(
    metrics: &[TaskMetric],
    baseline: &[TaskMetric],
) -> Result<Vec<(String, f64)>, MetricsError> {
    let mut table = MetricTable::new(
        metrics
            .iter()
            .map(|m| (format!("{}/{}", m.task, m.metric), m.direction))
            .collect(),
    );
    let base_vals = metrics
        .iter()
        .map(|m| {
            baseline
                .iter()
                .find(|b| b.task == m.task && b.metric == m.metric)
                .map(|b| b.value)
                .ok_or_else(|| MetricsError::MissingMetric {
                    row: "baseline".into(),
                    metric: format!("{}/{}", m.task, m.metric),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    table.push_row("baseline", base_vals)?;
    table.push_row("model", metrics.iter().map(|m| m.value).collect())?;
    let row = table_deltas(&table, "baseline", Convention::Sum)?
        .into_iter()
        .find(|r| r.model == "model")
        .expect("row pushed above");
    Ok(row.tasks)
}
