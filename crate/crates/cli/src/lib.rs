//! Command-line harness around the `adapmtl` library: TOML run configs,
//! multi-seed training sweeps, sparse export, delta reports and
//! benchmarks.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid config or input
//! table, 3 training divergence, 4 I/O, 5 export of an unfrozen
//! checkpoint.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_bench, cmd_export, cmd_gen_data, cmd_report, cmd_train, TrainArgs};
pub use config::RunConfig;
pub use error::CliError;
