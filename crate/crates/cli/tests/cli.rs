//! End-to-end runs of the `qkscope` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qkscope"))
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json_stdout(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_with_few_trials_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("verify.json");
    let out = run(&[
        "verify",
        "--trials",
        "200",
        "--seed",
        "3",
        "--output",
        path_str(&report),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let value: Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    let records = value["records"].as_array().unwrap();
    assert!(!records.is_empty());
    for r in records {
        assert_eq!(r["type"], "sweep");
        assert_eq!(r["violations"], 0);
    }
}

#[test]
fn analyze_reports_periodic_head() {
    let q = fixtures().join("periodic_m2.queries.tqkd");
    let k = fixtures().join("periodic_m2.keys.tqkd");
    let value = json_stdout(&run(&[
        "analyze",
        "--input",
        path_str(&q),
        "--input",
        path_str(&k),
    ]));
    let record = &value["records"][0];
    assert_eq!(record["regime"], "periodic_sequential");
    assert_eq!(record["dominant_channel"], 2);
    let predicted = record["period"]["predicted"].as_f64().unwrap();
    let measured = record["period"]["measured"].as_f64().unwrap();
    assert!((predicted - measured).abs() <= 1.0);
}

#[test]
fn input_order_does_not_matter() {
    let q = fixtures().join("reaccess.queries.tqkd");
    let k = fixtures().join("reaccess.keys.tqkd");
    let a = run(&["classify", "--input", path_str(&q), "--input", path_str(&k)]);
    let b = run(&["classify", "--input", path_str(&k), "--input", path_str(&q)]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).starts_with("0\t0\treaccess\t"));
}

#[test]
fn missing_key_dump_fails() {
    let q = fixtures().join("periodic_m2.queries.tqkd");
    let out = run(&["analyze", "--input", path_str(&q)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn allocate_alpha_zero_matches_preference_only_plan() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.json");
    let flat = dir.path().join("flat.json");
    std::fs::write(
        &scores,
        r#"{"p": [3.0, 1.0, 0.5, 2.5], "s": [0.1, 0.9, 0.4, 1.0]}"#,
    )
    .unwrap();
    std::fs::write(
        &flat,
        r#"{"p": [3.0, 1.0, 0.5, 2.5], "s": [1.0, 1.0, 1.0, 1.0]}"#,
    )
    .unwrap();
    let a = json_stdout(&run(&[
        "allocate",
        "--input",
        path_str(&scores),
        "--total",
        "997",
        "--alpha",
        "0",
    ]));
    let b = json_stdout(&run(&[
        "allocate",
        "--input",
        path_str(&flat),
        "--total",
        "997",
    ]));
    assert_eq!(a["budgets"], b["budgets"]);
    let sum: u64 = a["budgets"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(sum, 997);
}

#[test]
fn allocate_accepts_infinite_alpha() {
    let input = fixtures().join("pruning_32_layers.json");
    let value = json_stdout(&run(&[
        "allocate",
        "--input",
        path_str(&input),
        "--total",
        "4096",
        "--alpha",
        "inf",
    ]));
    assert_eq!(value["alpha"], "inf");
}

#[test]
fn prune_fixture_removes_the_redundant_block() {
    let input = fixtures().join("pruning_32_layers.json");
    let value = json_stdout(&run(&[
        "prune",
        "--input",
        path_str(&input),
        "--count",
        "9",
    ]));
    let removed: Vec<u64> = value["removed"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(removed, (21..30).collect::<Vec<_>>());
}

#[test]
fn heatmap_writes_binary_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("map.pgm");
    let q = fixtures().join("periodic_m2.queries.tqkd");
    let k = fixtures().join("periodic_m2.keys.tqkd");
    let out = run(&[
        "heatmap",
        "--input",
        path_str(&q),
        "--input",
        path_str(&k),
        "--output",
        path_str(&out_path),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let bytes = std::fs::read(out_path).unwrap();
    let header = b"P5\n256 256\n255\n";
    assert!(bytes.starts_with(header));
    assert_eq!(bytes.len(), header.len() + 256 * 256);
}

#[test]
fn synth_round_trips_through_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "synth",
        "--regime",
        "sequential",
        "--seed",
        "5",
        "--output",
        path_str(dir.path()),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let q = dir.path().join("sequential.queries.tqkd");
    let k = dir.path().join("sequential.keys.tqkd");
    let value = json_stdout(&run(&[
        "analyze",
        "--input",
        path_str(&q),
        "--input",
        path_str(&k),
    ]));
    assert_eq!(value["records"][0]["regime"], "sequential");
}

#[test]
fn worker_count_does_not_change_output() {
    let q = fixtures().join("periodic_m2.queries.tqkd");
    let k = fixtures().join("periodic_m2.keys.tqkd");
    let one = run(&[
        "--workers",
        "1",
        "analyze",
        "--input",
        path_str(&q),
        "--input",
        path_str(&k),
    ]);
    let four = run(&[
        "--workers",
        "4",
        "analyze",
        "--input",
        path_str(&q),
        "--input",
        path_str(&k),
    ]);
    assert!(one.status.success() && four.status.success());
    assert_eq!(one.stdout, four.stdout);

    let v1 = run(&["--workers", "1", "verify", "--trials", "100"]);
    let v4 = run(&["--workers", "4", "verify", "--trials", "100"]);
    assert_eq!(v1.stdout, v4.stdout);
}
