use std::path::PathBuf;
use std::process::ExitCode;

use adapmtl::metrics::Convention;
use adapmtl_cli::commands::{self, TrainArgs};
use adapmtl_cli::CliError;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adapmtl", version, about = "Adaptive multitask pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write logs, report and checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// `key=value`; dotted keys address a section. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Parent of the per-seed output directories; must exist.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Export a frozen checkpoint to the sparse CSR format.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-task and overall deltas of a metric table against a baseline row.
    Report {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        baseline: String,
        #[arg(long, default_value = "sum")]
        convention: Convention,
        /// JSON output path (default: `<table>.deltas.json`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time sparse against dense inference.
    Bench {
        #[arg(long)]
        sparse: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the configured synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_logging() {
    let level = std::env::var("AMTL_LOG_LEVEL").unwrap_or_else(|_| "warn".into());
    let level = match level.to_ascii_lowercase().as_str() {
        l @ ("error" | "warn" | "info" | "debug") => l.to_string(),
        other => {
            eprintln!("AMTL_LOG_LEVEL `{other}` not in error|warn|info|debug; using warn");
            "warn".into()
        }
    };
    env_logger::Builder::new().parse_filters(&level).init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            seed,
            overrides,
            out,
            resume,
        } => {
            let outcomes = commands::cmd_train(&TrainArgs {
                config,
                seed,
                overrides,
                out,
                resume,
            })?;
            for o in outcomes {
                let r = &o.report;
                println!(
                    "seed {}: sparsity {:.4} (freeze epoch {}), delta {} -> {}",
                    o.seed,
                    r.overall_sparsity,
                    r.freeze_epoch.map_or("-".into(), |e| e.to_string()),
                    r.overall_delta.map_or("-".into(), |d| format!("{d:.2}")),
                    o.dir.display()
                );
            }
        }
        Command::Export { checkpoint, out } => {
            let summary = commands::cmd_export(&checkpoint, &out)?;
            print!("{}", summary.render());
        }
        Command::Report {
            table,
            baseline,
            convention,
            out,
        } => {
            let rows = commands::cmd_report(&table, &baseline, convention, out.as_deref())?;
            print!("{}", commands::render_deltas(&rows));
        }
        Command::Bench {
            sparse,
            checkpoint,
            n,
            seed,
            out,
        } => {
            let r = commands::cmd_bench(&sparse, &checkpoint, n, seed, out.as_deref())?;
            print!("{}", commands::render_bench(&r));
        }
        Command::GenData {
            config,
            seed,
            overrides,
            out,
        } => {
            let ds = commands::cmd_gen_data(config.as_deref(), seed, &overrides, &out)?;
            println!(
                "{}: {} samples, {} features, {} tasks",
                out.display(),
                ds.num_samples(),
                ds.input_dim(),
                ds.tasks.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!(
                "{}",
                serde_json::to_string(&e.record()).expect("error record serializes")
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
