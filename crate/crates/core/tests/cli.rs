use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use timegate::harness::{load_checkpoint, CHECKPOINT_FILE, METRICS_JSON, TEST_FILE, TRAIN_FILE};
use timegate::synthdata::Dataset;

fn timegate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timegate"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

const TINY: &str = r#"{
  "seed": 4,
  "data": { "n_train": 40, "n_test": 20 },
  "train": { "epochs": 2 },
  "eval": { "selection": "topk", "budgets": [2, 4] }
}"#;

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let out = timegate(&["frobnicate"]);
    assert_eq!(code(&out), 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "stderr: {stderr}");
}

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(code(&timegate(&[])), 1);
}

#[test]
fn help_exits_0() {
    assert_eq!(code(&timegate(&["--help"])), 0);
}

#[test]
fn missing_config_flag_exits_1() {
    assert_eq!(code(&timegate(&["train"])), 1);
}

#[test]
fn missing_config_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = timegate(&["train", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn malformed_and_invalid_configs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    for body in ["{ not json", r#"{"train": {"lr": -1.0}}"#, r#"{"unknown_key": 3}"#] {
        let cfg = write_config(dir.path(), body);
        let out = timegate(&["generate-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code(&out), 1, "config {body}");
    }
}

#[test]
fn eval_without_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = timegate(&["eval", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_passes_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = timegate(&["gradcheck", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.starts_with("case,max_rel_err,checked,excluded,pass\n"));
    assert!(!csv.contains(",false\n"));
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let out_dir = dir.path().join("run");
    let out = out_dir.to_str().unwrap();
    for sub in ["generate-data", "train", "eval", "report", "tradeoff"] {
        let o = timegate(&[sub, "--config", cfg, "--out", out]);
        assert_eq!(code(&o), 0, "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        TRAIN_FILE,
        TEST_FILE,
        CHECKPOINT_FILE,
        "history.json",
        "metrics.csv",
        METRICS_JSON,
        "class_ratios.csv",
        "temporal_profile.csv",
        "gating_report.json",
        "tradeoff.csv",
        "reference_tradeoff.csv",
    ] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "header plus one row per budget");
    let ck = load_checkpoint(&out_dir.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.history.len(), 2);
    let train = Dataset::load(&out_dir.join(TRAIN_FILE)).unwrap();
    assert_eq!(train.videos.len(), 40);
}

#[test]
fn seed_override_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let load = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = timegate(&["generate-data", "--config", cfg, "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        Dataset::load(&out.join(TRAIN_FILE)).unwrap()
    };
    let a = load("9", "a");
    let b = load("9", "b");
    let c = load("10", "c");
    assert_eq!(a, b);
    assert_ne!(a.videos, c.videos);
}
