mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adapmtl::metrics::{Convention, MetricTable};
use adapmtl::sparse::SparseModel;
use adapmtl::trainer::Trainer;
use adapmtl::{Checkpoint, MultitaskModel, SynthDataset};
use adapmtl_cli::commands::{cmd_report, read_table};
use adapmtl_cli::config::apply_override;
use adapmtl_cli::{CliError, RunConfig};
use common::*;

const SMALL: &str = r#"
seeds = [7]

[train]
epochs = 3
batch_size = 32

[data]
n_samples = 200
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adapmtl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn overrides(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = RunConfig::from_toml(SMALL, &[]).unwrap();
    let text = cfg.to_toml();
    assert_eq!(RunConfig::from_toml(&text, &[]).unwrap(), cfg);
    let default = RunConfig::default();
    assert_eq!(RunConfig::from_toml(&default.to_toml(), &[]).unwrap(), default);
}

#[test]
fn reference_config_file_matches_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    let cfg = RunConfig::load(Some(&path), &[]).unwrap();
    let expected = RunConfig {
        seeds: vec![42, 43, 44, 45, 46],
        ..RunConfig::default()
    };
    assert_eq!(cfg, expected);
}

#[test]
fn unknown_keys_are_rejected() {
    for text in ["bogus = 1", "[train]\nlearning_rate = 0.1", "[data]\nrows = 3"] {
        assert!(matches!(RunConfig::from_toml(text, &[]), Err(CliError::Config(_))), "{text}");
    }
}

#[test]
fn overrides_resolve_bare_and_dotted_keys() {
    let cfg = RunConfig::from_toml(
        SMALL,
        &overrides(&[
            "target_sparsity=0.5",
            "train.lr_decay.factor=0.25",
            "warmup_epochs=2",
            "pruner_kind=shared-threshold",
            "data.seed=9",
        ]),
    )
    .unwrap();
    assert_eq!(cfg.train.target_sparsity, 0.5);
    assert_eq!(cfg.train.lr_decay.factor, 0.25);
    assert_eq!(cfg.train.warmup_epochs, Some(2));
    assert_eq!(cfg.train.pruner_kind.to_string(), "shared-threshold");
    assert_eq!(cfg.data.seed, 9);
    assert_eq!(cfg.train.seed, RunConfig::default().train.seed);

    let mut table = toml::Table::new();
    for bad in ["nonsense=1", "seed=3", "no_equals_sign", "train..lr=1"] {
        assert!(
            matches!(apply_override(&mut table, bad), Err(CliError::Config(_))),
            "{bad}"
        );
    }
}

#[test]
fn invalid_values_fail_validation_before_any_work() {
    for o in ["target_sparsity=1.0", "epochs=0", "seeds=[]", "lr=-1", "checkpoint_every=0"] {
        let err = RunConfig::from_toml(SMALL, &overrides(&[o])).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{o}: {err}");
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(&["train", "--config", &cfg, "--override", "epochs=0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("seed-7").exists());
}

#[test]
fn train_twice_gives_byte_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let outs: Vec<_> = ["a", "b"]
        .iter()
        .map(|n| {
            let out = dir.path().join(n);
            fs::create_dir(&out).unwrap();
            let o = run(&["train", "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap()]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            out.join("seed-7")
        })
        .collect();
    for f in ["losses.csv", "betas.csv", "sparsity.csv", "metrics.csv"] {
        let a = fs::read(outs[0].join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
    for f in ["report.json", "checkpoint.json"] {
        assert!(outs[0].join(f).is_file(), "{f}");
    }
}

#[test]
fn every_csv_output_parses_as_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let seed_dir = dir.path().join("seed-7");
    for f in ["losses.csv", "betas.csv", "sparsity.csv", "metrics.csv"] {
        let t = read_table(&seed_dir.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        assert!(!t.rows.is_empty(), "{f}");
    }
    let rows = cmd_report(
        &seed_dir.join("metrics.csv"),
        "dense",
        Convention::Sum,
        Some(&dir.path().join("d.json")),
    )
    .unwrap();
    assert_eq!(rows.len(), 2);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(seed_dir.join("report.json")).unwrap()).unwrap();
    let printed = report["overall_delta"].as_f64().unwrap();
    assert!((rows[1].overall - printed).abs() < 1e-9);
}

#[test]
fn missing_output_directory_exits_4_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let missing = dir.path().join("nope/deeper");
    let o = run(&["train", "--config", &cfg, "--out", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    let err = stderr(&o);
    assert!(err.contains(missing.to_str().unwrap()), "{err}");
    let record = err.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(record).unwrap();
    assert_eq!(v["exit_code"], 4);
    assert_eq!(v["error"], "io");
}

#[test]
fn target_override_reaches_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for target in ["0.8", "0.5"] {
        let o = run(&[
            "train",
            "--config",
            &cfg,
            "--override",
            &format!("target_sparsity={target}"),
            "--override",
            "baseline=false",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let report: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(dir.path().join("seed-7/report.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(report["target_sparsity"].as_f64().unwrap(), target.parse::<f64>().unwrap());
    }
}

#[test]
fn sweeps_write_one_directory_per_seed_and_resume_continues() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("seeds = [7]", "seeds = [1, 2]\ncheckpoint_every = 1");
    let cfg = write_config(dir.path(), &text);
    let o = run(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for s in [1, 2] {
        let d = dir.path().join(format!("seed-{s}"));
        assert!(d.join("checkpoint-epoch-1.json").is_file());
        assert!(d.join("checkpoint-epoch-2.json").is_file());
        assert!(!d.join("checkpoint-epoch-3.json").exists());
    }
    let finished = fs::read(dir.path().join("seed-2/losses.csv")).unwrap();

    let resumed = dir.path().join("resumed");
    fs::create_dir(&resumed).unwrap();
    let ck = dir.path().join("seed-2/checkpoint-epoch-1.json");
    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--resume",
        ck.to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(resumed.join("seed-2/losses.csv")).unwrap(), finished);
    assert!(!resumed.join("seed-1").exists());

    // a checkpoint from a different config is refused
    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--override",
        "lr=0.5",
        "--resume",
        ck.to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

fn small_trainer() -> (Trainer, SynthDataset) {
    let cfg = RunConfig::from_toml(SMALL, &[]).unwrap();
    let d = SynthDataset::generate(1, 200, 16, &cfg.data.tasks).unwrap();
    let m = MultitaskModel::build(&cfg.model, 1).unwrap();
    (Trainer::new(m, &d, cfg.train_for_seed(1)).unwrap(), d)
}

#[test]
fn export_needs_a_frozen_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (mut t, d) = small_trainer();
    t.run_epoch(&d).unwrap();
    let ck = dir.path().join("ck.json");
    Checkpoint::from_trainer(&t).save(&ck).unwrap();
    let out = dir.path().join("model.amsp");
    let o = run(&["export", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(!out.exists());

    let epoch = t.epoch;
    t.pruner.freeze(&mut t.model, epoch);
    let source = Checkpoint::from_trainer(&t);
    source.save(&ck).unwrap();
    let o = run(&["export", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = String::from_utf8(o.stdout).unwrap();
    assert!(summary.contains("backbone"), "{summary}");
    let loaded = SparseModel::load(&out).unwrap();
    assert_eq!(loaded, SparseModel::export(&source.model, &source.pruner).unwrap());
    assert_eq!(loaded.nnz(), t.model.components().map(|c| c.weight_count()).sum::<usize>());
}

#[test]
fn bench_runs_and_reports_the_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let (mut t, _) = small_trainer();
    t.pruner.freeze(&mut t.model, 0);
    let ck = dir.path().join("ck.json");
    Checkpoint::from_trainer(&t).save(&ck).unwrap();
    let sparse = dir.path().join("m.amsp");
    SparseModel::export(&t.model, &t.pruner).unwrap().save(&sparse).unwrap();
    let json = dir.path().join("bench.json");
    let o = run(&[
        "bench",
        "--sparse",
        sparse.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--n",
        "1",
        "--out",
        json.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["mul_add_ratio"].as_f64().unwrap(), 1.0);
    assert_eq!(v["n_inputs"], 1);

    let o = run(&[
        "bench",
        "--sparse",
        dir.path().join("missing.amsp").to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4);
}

#[test]
fn report_reproduces_the_resnet34_table() {
    let bad = delta_mismatches(&report_table("nyuv2_resnet34.csv"), &RESNET34_DELTAS, 0.02);
    assert!(bad.is_empty(), "cells off by more than 0.02: {bad:?}");
}

#[test]
fn report_reproduces_the_mobilenetv2_table() {
    let bad = delta_mismatches(&report_table("nyuv2_mobilenetv2.csv"), &MOBILENETV2_DELTAS, 0.02);
    assert!(bad.is_empty(), "cells off by more than 0.02: {bad:?}");
}

#[test]
fn report_baseline_against_itself_is_zero_and_mean_divides_by_metric_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = table_path("nyuv2_resnet34.csv");
    let sum = cmd_report(&path, "dense", Convention::Sum, Some(&dir.path().join("s.json"))).unwrap();
    let mean = cmd_report(&path, "dense", Convention::Mean, Some(&dir.path().join("m.json"))).unwrap();
    assert!(sum[0].tasks.iter().all(|(_, v)| *v == 0.0) && sum[0].overall == 0.0);
    let table = read_table(&path).unwrap();
    let sizes: Vec<usize> = table.tasks().iter().map(|(_, m)| m.len()).collect();
    assert_eq!(sizes, vec![2, 5, 5]);
    for (s, m) in sum.iter().zip(&mean) {
        for (((_, sv), (_, mv)), n) in s.tasks.iter().zip(&m.tasks).zip(&sizes) {
            assert!((sv / *n as f64 - mv).abs() < 1e-12);
        }
    }
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 7);
}

#[test]
fn report_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "model,a/x\ndirection,sideways\ndense,1\n").unwrap();
    let o = run(&["report", "--table", bad.to_str().unwrap(), "--baseline", "dense"]);
    assert_eq!(code(&o), 2);
    let o = run(&[
        "report",
        "--table",
        table_path("nyuv2_resnet34.csv").to_str().unwrap(),
        "--baseline",
        "missing_row",
        "--out",
        dir.path().join("x.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    let o = run(&["report", "--table", dir.path().join("none.csv").to_str().unwrap(), "--baseline", "dense"]);
    assert_eq!(code(&o), 4);
    let o = run(&[
        "report",
        "--table",
        table_path("nyuv2_mobilenetv2.csv").to_str().unwrap(),
        "--baseline",
        "dense",
        "--out",
        dir.path().join("ok.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().contains("adapmtl"));
}

#[test]
fn gen_data_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.bin");
    let o = run(&[
        "gen-data",
        "--seed",
        "5",
        "--override",
        "n_samples=300",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let loaded = SynthDataset::load(&out).unwrap();
    let cfg = RunConfig::default();
    assert_eq!(
        loaded,
        SynthDataset::generate(5, 300, cfg.data.input_dim, &cfg.data.tasks).unwrap()
    );

    // a run reading the saved file matches a run generating it
    let text = format!("{SMALL}\n").replace(
        "[data]\nn_samples = 200",
        &format!("[data]\npath = {:?}", out.to_str().unwrap()),
    );
    let cfg = write_config(dir.path(), &text);
    let o = run(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn metric_tables_round_trip_through_csv() {
    let t = read_table(&table_path("nyuv2_mobilenetv2.csv")).unwrap();
    let back = MetricTable::from_csv(t.to_csv().as_bytes()).unwrap();
    assert_eq!(back, t);
}
