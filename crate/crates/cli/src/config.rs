//! Run configuration: TOML schema, validation and `key=value` overrides.

use std::path::{Path, PathBuf};

use adapmtl::data::{default_tasks, validate_specs, TaskSpec};
use adapmtl::trainer::{spec_for_tasks, TrainConfig};
use adapmtl::{ModelSpec, MultitaskModel};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Load this dataset file instead of generating one.
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub n_samples: usize,
    pub input_dim: usize,
    pub tasks: Vec<TaskSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            seed: 42,
            n_samples: 2000,
            input_dim: 16,
            tasks: default_tasks(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Parent directory of the per-seed output directories. Must exist.
    pub out_dir: Option<PathBuf>,
    /// One training run per seed; each run uses its seed for model
    /// initialization and shuffling.
    pub seeds: Vec<u64>,
    /// Also train a dense model per seed and report deltas against it.
    pub baseline: bool,
    /// Write `checkpoint-epoch-<n>.json` every this many epochs.
    pub checkpoint_every: Option<usize>,
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            out_dir: None,
            seeds: vec![42],
            baseline: true,
            checkpoint_every: None,
            train: TrainConfig::default(),
            model: spec_for_tasks(vec![data.input_dim, 32, 32], &[8, 8, 4], &data.tasks),
            data,
        }
    }
}

fn config_err(e: impl ToString) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let parsed: Table = toml::from_str(text).map_err(config_err)?;
        // overrides act on the fully defaulted tree, so a dotted key can
        // name a field of a section the file leaves out
        let mut table = Table::try_from(from_table(parsed)?).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg = from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides).map_err(|e| match (e, path) {
            (CliError::Config(m), Some(p)) => CliError::Config(format!("{}: {m}", p.display())),
            (e, _) => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Full validation; nothing is computed before this passes.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(config_err)?;
        if self.seeds.is_empty() {
            return Err(config_err("seeds must list at least one seed"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(config_err(format!("seed {s} listed twice")));
        }
        if self.checkpoint_every == Some(0) {
            return Err(config_err("checkpoint_every must be >= 1"));
        }
        MultitaskModel::build(&self.model, 0).map_err(config_err)?;
        if self.data.path.is_none() {
            validate_specs(self.data.n_samples, self.data.input_dim, &self.data.tasks)
                .map_err(config_err)?;
            self.check_tasks(&self.data.tasks, self.data.input_dim)?;
            let train_len = (self.data.n_samples as f64 * adapmtl::data::TRAIN_FRACTION) as usize;
            if self.train.batch_size > train_len {
                return Err(config_err(format!(
                    "batch_size {} exceeds about {train_len} training samples",
                    self.train.batch_size
                )));
            }
        }
        Ok(())
    }

    /// Model heads must match the dataset's tasks one to one.
    pub fn check_tasks(&self, tasks: &[TaskSpec], input_dim: usize) -> Result<(), CliError> {
        if self.model.heads.len() != tasks.len() {
            return Err(config_err(format!(
                "model has {} heads, data has {} tasks",
                self.model.heads.len(),
                tasks.len()
            )));
        }
        if self.model.input_dim() != input_dim {
            return Err(config_err(format!(
                "model input width {} differs from data input_dim {input_dim}",
                self.model.input_dim()
            )));
        }
        for (h, t) in self.model.heads.iter().zip(tasks) {
            let out = *h.widths.last().expect("validated widths");
            if h.name != t.name || out != t.output_dim || h.loss != t.kind.loss() {
                return Err(config_err(format!(
                    "head `{}` (out {out}, loss {}) does not fit task `{}` (out {}, {:?})",
                    h.name, h.loss, t.name, t.output_dim, t.kind
                )));
            }
        }
        Ok(())
    }

    /// Training config of one sweep member.
    pub fn train_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

fn from_table(table: Table) -> Result<RunConfig, CliError> {
    table.try_into().map_err(config_err)
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn table_at<'a>(root: &'a mut Table, path: &[String]) -> Option<&'a mut Table> {
    path.iter()
        .try_fold(root, |t, k| t.get_mut(k).and_then(Value::as_table_mut))
}

/// Paths of every table in `root`, including the root itself.
fn table_paths(root: &Table, prefix: Vec<String>, out: &mut Vec<Vec<String>>) {
    out.push(prefix.clone());
    for (k, v) in root {
        if let Value::Table(t) = v {
            let mut p = prefix.clone();
            p.push(k.clone());
            table_paths(t, p, out);
        }
    }
}

/// Applies one `key=value` override. Dotted keys address a path
/// (`train.lr_decay.factor=0.3`); a bare key is placed in the one section
/// of the schema that accepts it (`target_sparsity=0.8`).
pub fn apply_override(root: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let value = parse_value(raw.trim());
    let segments: Vec<String> = key.split('.').map(str::to_string).collect();
    if segments.iter().any(String::is_empty) {
        return Err(config_err(format!("override key `{key}` is malformed")));
    }
    if segments.len() > 1 {
        let (last, parents) = segments.split_last().expect("non-empty");
        let mut t = &mut *root;
        for p in parents {
            t = t
                .entry(p.clone())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .ok_or_else(|| config_err(format!("override `{key}`: `{p}` is not a section")))?;
        }
        t.insert(last.clone(), value);
        return Ok(());
    }

    // Start from the full effective config so every section is present.
    let full: Table = Table::try_from(from_table(root.clone())?).map_err(config_err)?;
    let mut paths = Vec::new();
    table_paths(&full, Vec::new(), &mut paths);
    let existing: Vec<&Vec<String>> = paths
        .iter()
        .filter(|p| {
            let mut f = full.clone();
            table_at(&mut f, p).is_some_and(|t| t.contains_key(key))
        })
        .collect();
    let candidates: Vec<Vec<String>> = if existing.is_empty() {
        // optional fields are absent from the serialized form; accept the
        // sections whose schema takes the key
        paths
            .iter()
            .filter(|p| {
                let mut trial = root.clone();
                insert_at(&mut trial, p, key, value.clone());
                from_table(trial).is_ok()
            })
            .cloned()
            .collect()
    } else {
        existing.into_iter().cloned().collect()
    };
    match candidates.as_slice() {
        [p] => {
            insert_at(root, p, key, value);
            Ok(())
        }
        [] => Err(config_err(format!("unknown config key `{key}`"))),
        many => Err(config_err(format!(
            "config key `{key}` is ambiguous; use one of {}",
            many.iter()
                .map(|p| {
                    let mut s = p.join(".");
                    if !s.is_empty() {
                        s.push('.');
                    }
                    s + key
                })
                .collect::<Vec<_>>()
                .join(", ")
        ))),
    }
}

fn insert_at(root: &mut Table, path: &[String], key: &str, value: Value) {
    let mut t = root;
    for p in path {
        t = t
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("path leads through tables");
    }
    t.insert(key.to_string(), value);
}
