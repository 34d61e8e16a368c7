use std::path::Path;
use std::process::Command;

use corrdp::baseline::calibrate_gaussian_sigma;
use corrdp::cli::{SweepRow, TrainRow};
use corrdp::optimizer::OptimizationResult;
use serde_json::{json, Value};
use tempfile::TempDir;

fn run(dir: &TempDir, command: &str, config: &Value, extra: &[&str]) -> (i32, String) {
    let cfg = dir.path().join(format!("{command}.json"));
    std::fs::write(&cfg, config.to_string()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_corrdp"))
        .args([command, "--config", cfg.to_str().unwrap()])
        .args(extra)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
    )
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn calibrate_single_batch_matches_gaussian_and_releases() {
    let dir = TempDir::new().unwrap();
    let config = json!({
        "epsilon": 1.0, "delta": 1.25e-5, "sample_count": 1_000_000, "verify_samples": 1_000_000, "seed": 1,
        "schema": {"batches_per_epoch": 1, "epochs": 1}, "matrix": {"kind": "identity"}
    });
    let (code, stdout) = run(&dir, "calibrate", &config, &[]);
    assert_eq!(code, 0, "{stdout}");
    let report: Value = serde_json::from_str(&stdout).unwrap();
    let sigma = report["sigma_star"].as_f64().unwrap();
    let exact = calibrate_gaussian_sigma(1.0, 1e-5, 1.0).unwrap();
    assert!((sigma / exact - 1.0).abs() < 0.01, "{sigma} vs {exact}");
    let bound = (-1e6 * 0.0625 * 1.25e-5 / (8.0 * 1.25 / 3.0 - 2.0 / 3.0f64)).exp();
    assert!((report["bernstein_failure_prob"].as_f64().unwrap() - bound).abs() < 1e-15);
    assert_eq!(report["release"]["decision"], "proceed");
}

#[test]
fn verify_aborts_with_exit_two() {
    let dir = TempDir::new().unwrap();
    let mut config = json!({
        "epsilon": 1.0, "delta": 1e-5, "sigma": 0.01, "verify_samples": 20_000,
        "schema": {"batches_per_epoch": 2, "epochs": 1}, "matrix": {"kind": "identity"}
    });
    assert_eq!(run(&dir, "verify", &config, &[]).0, 2);
    config["sigma"] = json!(1000.0);
    let (code, stdout) = run(&dir, "verify", &config, &[]);
    assert_eq!(code, 0);
    let report: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["release"]["decision"], "proceed");
}

#[test]
fn missing_config_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_corrdp"))
        .args(["verify"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn rmse_sweep_csv_round_trips_and_is_thread_independent() {
    let dir = TempDir::new().unwrap();
    let config = json!({
        "epsilons": [0.5, 2.0], "delta": 1e-4, "sample_count": 20_000, "seed": 3,
        "schema": {"batches_per_epoch": 4, "epochs": 1},
        "matrices": [
            {"name": "identity", "spec": {"kind": "identity"}},
            {"name": "toeplitz", "spec": {"kind": "toeplitz", "coeffs": [1.0, 0.5, 0.375]}}
        ]
    });
    let out1 = dir.path().join("a.csv");
    let out2 = dir.path().join("b.csv");
    assert_eq!(
        run(
            &dir,
            "rmse-sweep",
            &config,
            &["--out", out1.to_str().unwrap(), "--threads", "1"]
        )
        .0,
        0
    );
    assert_eq!(
        run(
            &dir,
            "rmse-sweep",
            &config,
            &["--out", out2.to_str().unwrap(), "--threads", "2"]
        )
        .0,
        0
    );
    assert_eq!(read(&out1), read(&out2));
    let rows: Vec<SweepRow> = csv::Reader::from_path(&out1)
        .unwrap()
        .deserialize()
        .map(Result::unwrap)
        .collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert!(r.pct_improvement > 0.0, "{r:?}");
        assert!((r.pct_improvement - 100.0 * (1.0 - r.rmse_amp / r.rmse_unamp)).abs() < 1e-9);
    }
}

#[test]
fn optimize_outputs_round_trip() {
    let dir = TempDir::new().unwrap();
    let mut config = json!({
        "family": {"kind": "blt", "buffers": 3}, "epsilon": 1.0, "delta": 1e-4,
        "schema": {"batches_per_epoch": 4, "epochs": 2}, "steps": 0, "learning_rate": 0.01,
        "samples_per_step": 2000, "final_sample_count": 20_000, "seed": 5
    });
    let (code, stdout) = run(&dir, "optimize", &config, &[]);
    assert_eq!(code, 0);
    let result: OptimizationResult = serde_json::from_str(&stdout).unwrap();
    assert_eq!(result.params.len(), 6);
    assert_eq!(result.matrix.parameter_count(), 6);
    assert!(result.trace.steps.is_empty());

    config["family"] = json!({"kind": "toeplitz"});
    config["steps"] = json!(3);
    let (code, stdout) = run(&dir, "optimize", &config, &[]);
    assert_eq!(code, 0);
    let result: OptimizationResult = serde_json::from_str(&stdout).unwrap();
    assert_eq!(result.trace.steps.len(), 3);
    assert_eq!(
        serde_json::to_value(&result).unwrap(),
        serde_json::from_str::<Value>(&stdout).unwrap()
    );
}

#[test]
fn counterexample_reports_every_grid_point() {
    let dir = TempDir::new().unwrap();
    let config = json!({"sigmas": [1.0], "alphas": [0.0, 1.6487212707001282]});
    let (code, stdout) = run(&dir, "counterexample", &config, &[]);
    assert_eq!(code, 0);
    let points: Value = serde_json::from_str(&stdout).unwrap();
    let points = points.as_array().unwrap();
    assert_eq!(points.len(), 2);
    assert!((points[0]["h_opposite"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!((points[0]["h_same"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(points[1]["strict"], true);
}

#[test]
fn train_writes_traces_and_metadata() {
    let dir = TempDir::new().unwrap();
    let config = json!({
        "training": {
            "model_dim": 3, "dataset_size": 64, "schema": {"batches_per_epoch": 4, "epochs": 2}, "batch_size": 16,
            "learning_rate": 0.2, "data_seed": 0, "assignment_seed": 0, "noise_seed": 0, "mode": "practical_bib"
        },
        "matrix": {"kind": "identity"}, "epsilon": 2.0, "delta": 1e-4, "sample_count": 20_000, "repeats": 2
    });
    let out = dir.path().join("traces.csv");
    assert_eq!(
        run(&dir, "train", &config, &["--out", out.to_str().unwrap()]).0,
        0
    );
    let rows: Vec<TrainRow> = csv::Reader::from_path(&out)
        .unwrap()
        .deserialize()
        .map(Result::unwrap)
        .collect();
    assert_eq!(rows.len(), 3 * 2 * 8);
    let meta: Value = serde_json::from_str(&read(&out.with_extension("json"))).unwrap();
    assert_eq!(meta["modes"].as_array().unwrap().len(), 3);
    assert!(
        meta["sigma_amplified"].as_f64().unwrap() < meta["sigma_unamplified"].as_f64().unwrap()
    );
}
