//! The `train`, `export`, `report`, `bench` and `gen-data` commands.

use std::fs;
use std::path::{Path, PathBuf};

use adapmtl::checkpoint::Checkpoint;
use adapmtl::metrics::{table_deltas, Convention, MetricTable, RowDeltas, RunReport, TaskMetric};
use adapmtl::sparse::{bench, BenchReport, SparseModel};
use adapmtl::trainer::{train, TrainConfig, Trainer};
use adapmtl::{MultitaskModel, PrunerKind, SynthDataset};
use log::{info, warn};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

/// Result of one sweep member.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub report: RunReport,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn existing_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Io {
            path: path.to_path_buf(),
            message: "output directory does not exist".into(),
        })
    }
}

fn load_data(cfg: &RunConfig) -> Result<SynthDataset, CliError> {
    match &cfg.data.path {
        Some(p) => {
            let ds = SynthDataset::load(p)?;
            cfg.check_tasks(&ds.tasks, ds.input_dim())?;
            Ok(ds)
        }
        None => Ok(SynthDataset::generate(
            cfg.data.seed,
            cfg.data.n_samples,
            cfg.data.input_dim,
            &cfg.data.tasks,
        )?),
    }
}

/// Metric table with the dense baseline and the run as rows, in the
/// layout `report` reads.
pub fn metrics_table(pruner: &str, metrics: &[TaskMetric], baseline: &[TaskMetric]) -> String {
    let mut t = MetricTable::new(
        metrics
            .iter()
            .map(|m| (format!("{}/{}", m.task, m.metric), m.direction))
            .collect(),
    );
    let row = |src: &[TaskMetric]| -> Vec<f64> {
        metrics
            .iter()
            .map(|m| {
                src.iter()
                    .find(|b| b.task == m.task && b.metric == m.metric)
                    .map_or(f64::NAN, |b| b.value)
            })
            .collect()
    };
    t.push_row("dense", row(baseline)).expect("same width");
    if pruner != "dense" {
        t.push_row(pruner, row(metrics)).expect("same width");
    }
    t.to_csv()
}

fn run_seed(
    cfg: &RunConfig,
    data: &SynthDataset,
    seed: u64,
    out: &Path,
    resume: Option<Checkpoint>,
) -> Result<SeedOutcome, CliError> {
    let dir = out.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut trainer = match resume {
        Some(ck) => ck.into_trainer(),
        None => {
            let model = MultitaskModel::build(&cfg.model, seed)
                .map_err(|e| CliError::Config(e.to_string()))?;
            Trainer::new(model, data, cfg.train_for_seed(seed))?
        }
    };
    while !trainer.is_done() {
        trainer.run_epoch(data)?;
        if let Some(k) = cfg.checkpoint_every {
            if trainer.epoch % k == 0 && !trainer.is_done() {
                let p = dir.join(format!("checkpoint-epoch-{}.json", trainer.epoch));
                Checkpoint::from_trainer(&trainer).save(&p)?;
            }
        }
    }
    info!("seed {seed}: training finished after {} epochs", trainer.epoch);

    let own = trainer.log.last().map(|e| e.eval.clone()).unwrap_or_default();
    let baseline = if cfg.baseline && trainer.config.pruner_kind != PrunerKind::None {
        let dense_cfg = TrainConfig {
            pruner_kind: PrunerKind::None,
            ..trainer.config.clone()
        };
        let model = MultitaskModel::build(&cfg.model, seed)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let dense = train(model, data, dense_cfg)?;
        Some(dense.log.last().map(|e| e.eval.clone()).unwrap_or_default())
    } else if cfg.baseline {
        Some(own.clone())
    } else {
        None
    };
    let report = trainer.report(baseline.as_deref())?;

    write(&dir.join("losses.csv"), trainer.log.losses_csv())?;
    write(&dir.join("betas.csv"), trainer.log.betas_csv())?;
    write(&dir.join("sparsity.csv"), trainer.log.sparsity_csv())?;
    if let Some(b) = &baseline {
        let name = match trainer.config.pruner_kind {
            PrunerKind::None => "dense".to_string(),
            k => k.to_string(),
        };
        write(&dir.join("metrics.csv"), metrics_table(&name, &own, b))?;
    }
    write(
        &dir.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Checkpoint::from_trainer(&trainer).save(&dir.join("checkpoint.json"))?;
    Ok(SeedOutcome { seed, dir, report })
}

/// Trains every configured seed in parallel; outputs go to
/// `<out>/seed-<n>/`.
pub fn cmd_train(args: &TrainArgs) -> Result<Vec<SeedOutcome>, CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    let resume = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let seed = ck.config.seed;
            if args.seed.is_some_and(|s| s != seed) {
                return Err(CliError::Config(format!(
                    "--seed {} disagrees with the checkpoint's seed {seed}",
                    args.seed.unwrap_or_default()
                )));
            }
            if cfg.train_for_seed(seed) != ck.config {
                return Err(CliError::Config(format!(
                    "{}: checkpoint was written with a different training config",
                    p.display()
                )));
            }
            cfg.seeds = vec![seed];
            Some(ck)
        }
        None => None,
    };
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory (--out or out_dir)".into()))?;
    existing_dir(&out)?;
    let data = load_data(&cfg)?;
    write(&out.join("config.toml"), cfg.to_toml())?;

    let results: Vec<Result<SeedOutcome, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let (cfg, data, out) = (&cfg, &data, &out);
                let ck = resume.clone();
                s.spawn(move || run_seed(cfg, data, seed, out, ck))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Failed("worker panicked".into()))))
            .collect()
    });
    let mut outcomes = Vec::new();
    let mut first_err = None;
    for (seed, r) in cfg.seeds.iter().zip(results) {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                warn!("seed {seed}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(outcomes),
    }
}

/// Per-component nnz of an exported model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub components: Vec<(String, usize, usize)>,
}

impl ExportSummary {
    pub fn render(&self) -> String {
        let mut s = format!("{:<16} {:>8} {:>8} {:>9}\n", "component", "nnz", "total", "sparsity");
        for (name, nnz, total) in &self.components {
            let sp = 1.0 - *nnz as f64 / *total as f64;
            s += &format!("{name:<16} {nnz:>8} {total:>8} {:>8.2}%\n", 100.0 * sp);
        }
        s
    }
}

pub fn cmd_export(checkpoint: &Path, out: &Path) -> Result<ExportSummary, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let sparse = SparseModel::export(&ck.model, &ck.pruner).map_err(|e| match e {
        adapmtl::sparse::SparseError::NotFrozen => CliError::NotFrozen(checkpoint.to_path_buf()),
        other => other.into(),
    })?;
    sparse.save(out)?;
    Ok(ExportSummary {
        components: sparse
            .components
            .iter()
            .zip(ck.model.components())
            .map(|(s, c)| (s.name.clone(), s.nnz(), c.weight_count()))
            .collect(),
    })
}

pub fn read_table(path: &Path) -> Result<MetricTable, CliError> {
    let text = fs::read(path).map_err(|e| CliError::io(path, e))?;
    MetricTable::from_csv(text.as_slice())
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Deltas of every row of `table` against `baseline`; JSON is written to
/// `json_out`, or next to the table as `<table>.deltas.json`.
pub fn cmd_report(
    table: &Path,
    baseline: &str,
    convention: Convention,
    json_out: Option<&Path>,
) -> Result<Vec<RowDeltas>, CliError> {
    let t = read_table(table)?;
    let rows = table_deltas(&t, baseline, convention)?;
    let json_path = json_out.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = table.as_os_str().to_owned();
        p.push(".deltas.json");
        PathBuf::from(p)
    });
    write(
        &json_path,
        serde_json::to_string_pretty(&rows).expect("deltas serialize"),
    )?;
    Ok(rows)
}

pub fn render_deltas(rows: &[RowDeltas]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}", "model");
    for (t, _) in &first.tasks {
        s += &format!(" {:>12}", format!("Δ {t}"));
    }
    s += &format!(" {:>9}\n", "Δ_T");
    for r in rows {
        s += &format!("{:<width$}", r.model);
        for (_, v) in &r.tasks {
            s += &format!(" {v:>12.2}");
        }
        s += &format!(" {:>9.2}\n", r.overall);
    }
    s
}

pub fn cmd_bench(
    sparse_path: &Path,
    checkpoint: &Path,
    n: usize,
    seed: u64,
    json_out: Option<&Path>,
) -> Result<BenchReport, CliError> {
    if n == 0 {
        return Err(CliError::Config("n must be >= 1".into()));
    }
    let sparse = SparseModel::load(sparse_path)?;
    let ck = Checkpoint::load(checkpoint)?;
    if sparse.spec != ck.model.spec {
        return Err(CliError::Config(
            "sparse model and checkpoint have different architectures".into(),
        ));
    }
    let (dense_w, _) = ck.pruner.effective(&ck.model);
    let report = bench(&sparse, &ck.model, &dense_w, n, seed)?;
    if let Some(p) = json_out {
        write(p, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(report)
}

pub fn render_bench(r: &BenchReport) -> String {
    format!(
        "{:<8} {:>14} {:>14}\n{:<8} {:>14.0} {:>14}\n{:<8} {:>14.0} {:>14}\nratio {:.4} over {} inputs\n",
        "path",
        "median ns",
        "mul-adds",
        "dense",
        r.dense_median_ns,
        r.dense_mul_adds,
        "sparse",
        r.sparse_median_ns,
        r.sparse_mul_adds,
        r.mul_add_ratio,
        r.n_inputs
    )
}

/// Generates the configured dataset and writes it (plus sidecar) to `out`.
pub fn cmd_gen_data(
    config: Option<&Path>,
    seed: Option<u64>,
    overrides: &[String],
    out: &Path,
) -> Result<SynthDataset, CliError> {
    let mut cfg = RunConfig::load(config, overrides)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    cfg.data.path = None;
    let ds = load_data(&cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        existing_dir(parent)?;
    }
    ds.save(out)?;
    Ok(ds)
}
