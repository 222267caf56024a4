#![allow(dead_code)]

use std::path::PathBuf;

use adapmtl::metrics::{Convention, RowDeltas};
use adapmtl_cli::commands::cmd_report;

/// Printed delta cells per row: seg, normal, depth, overall.
pub const RESNET34_DELTAS: [(&str, [f64; 4]); 7] = [
    ("dense", [0.0, 0.0, 0.0, 0.0]),
    ("snip", [-10.15, 2.63, -25.49, -11.00]),
    ("lth", [-0.35, 0.41, -12.92, -4.29]),
    ("imp", [0.46, -1.77, -3.82, -1.71]),
    ("disparse", [0.96, -4.48, -5.76, -3.10]),
    ("shared_threshold", [-0.46, -7.06, -13.68, -7.07]),
    ("adapmtl", [3.55, 3.41, 0.38, 2.45]),
];

pub const MOBILENETV2_DELTAS: [(&str, [f64; 4]); 7] = [
    ("dense", [0.0, 0.0, 0.0, 0.0]),
    ("snip", [-8.57, -12.03, -9.38, -9.99]),
    ("lth", [-7.01, -0.03, -8.32, -5.12]),
    ("imp", [-7.13, -9.11, 6.00, -3.41]),
    ("disparse", [-0.10, -4.87, -2.94, -2.64]),
    ("shared_threshold", [-7.53, -10.91, -3.47, -7.30]),
    ("adapmtl", [1.99, 5.25, 0.75, 2.66]),
];

pub fn table_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// Cells off by more than `tol`, as `row/column: got vs printed`.
pub fn delta_mismatches(rows: &[RowDeltas], expected: &[(&str, [f64; 4])], tol: f64) -> Vec<String> {
    let mut bad = Vec::new();
    for (name, cells) in expected {
        let Some(row) = rows.iter().find(|r| r.model == *name) else {
            bad.push(format!("{name}: row missing"));
            continue;
        };
        let got: Vec<(String, f64)> = row
            .tasks
            .iter()
            .cloned()
            .chain([("overall".to_string(), row.overall)])
            .collect();
        for ((col, g), want) in got.iter().zip(cells) {
            if (g - want).abs() > tol {
                bad.push(format!("{name}/{col}: {g:.4} vs {want}"));
            }
        }
    }
    bad
}

/// Runs the report command on a transcribed table, JSON to a temp dir.
pub fn report_table(name: &str) -> Vec<RowDeltas> {
    let dir = tempfile::tempdir().unwrap();
    cmd_report(
        &table_path(name),
        "dense",
        Convention::Sum,
        Some(&dir.path().join("deltas.json")),
    )
    .unwrap()
}
