use std::path::Path;
use std::process::{Command, Output};

fn homoscale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_homoscale"))
        .args(args)
        .env("HOMOSCALE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const COEF: &str = r#"{
  "modes": [
    {"freq": [[0], [0]], "matrix": [[3.0]]},
    {"freq": [[1], [0]], "matrix": [[0.5]]},
    {"freq": [[-1], [0]], "matrix": [[0.5]]},
    {"freq": [[0], [1]], "matrix": [[0.5]]},
    {"freq": [[0], [-1]], "matrix": [[0.5]]}
  ],
  "lambda": 1.0,
  "C0": 5.0,
  "Lambda0": 5.0
}"#;

#[test]
fn run_writes_report_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = homoscale(&["run", "toy_averaging", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json = std::fs::read_to_string(dir.path().join("toy_averaging.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["passed"], true);
    assert!(dir.path().join("toy_averaging_rho.csv").exists());
}

#[test]
fn run_reads_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"beta0": 4}"#).unwrap();
    let out = homoscale(&[
        "run",
        "counterexample_exponential",
        "--config",
        path(&cfg),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json = std::fs::read_to_string(dir.path().join("counterexample_exponential.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["config"]["beta0"], 4);
}

#[test]
fn exhausted_time_budget_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"time_budget_s": 0.0}"#).unwrap();
    let out = homoscale(&["run", "rate_1d", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_experiment_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = homoscale(&["run", "no_such_experiment", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown experiment"));
}

#[test]
fn homogenize_matches_harmonic_mean_in_one_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let coef = dir.path().join("coef.json");
    std::fs::write(&coef, COEF).unwrap();
    let out = homoscale(&[
        "homogenize",
        "--coef",
        path(&coef),
        "--eps",
        "1,0.0625",
        "--reference",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json = std::fs::read_to_string(dir.path().join("pipeline.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let abar = v["abar"][0][0].as_f64().unwrap();
    // harmonic mean of 3 + cos(2 pi s) + cos(2 pi t) by a fine midpoint rule
    let m = 400;
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            let (s, t) = ((i as f64 + 0.5) / m as f64, (j as f64 + 0.5) / m as f64);
            let a = 3.0 + (2.0 * std::f64::consts::PI * s).cos() + (2.0 * std::f64::consts::PI * t).cos();
            acc += 1.0 / a;
        }
    }
    let hm = (m * m) as f64 / acc;
    // the regularized corrector biases the result by O(tau^2)
    assert!((abar - hm).abs() < 1e-5, "{abar} vs {hm}");
    assert!(v["measured"]["l2_error"].as_f64().unwrap() <= v["measured"]["budget"].as_f64().unwrap());
}

#[test]
fn homogenize_rejects_mismatched_scales() {
    let dir = tempfile::tempdir().unwrap();
    let coef = dir.path().join("coef.json");
    std::fs::write(&coef, COEF).unwrap();
    let out = homoscale(&["homogenize", "--coef", path(&coef), "--eps", "1,0.1,0.01", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn malformed_json_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let coef = dir.path().join("coef.json");
    std::fs::write(&coef, "{not json").unwrap();
    let out = homoscale(&["homogenize", "--coef", path(&coef), "--eps", "1,0.1", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn invalid_thread_count_exits_three() {
    let out = Command::new(env!("CARGO_BIN_EXE_homoscale"))
        .arg("list")
        .env("HOMOSCALE_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn calibrate_writes_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = homoscale(&["calibrate", "--oracle", "supercell", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json = std::fs::read_to_string(dir.path().join("calibration.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["points"].as_array().unwrap().len(), 18);
    assert!(v["recommended"].is_object());
}
