use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qtlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qtlab"))
        .args(args)
        .env("QTLAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn out_dir(dir: &Path) -> &str {
    dir.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn help_exits_zero() {
    let o = qtlab(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["train", "finetune", "calibrate", "sweep", "analyze", "quantize-eval", "pipeline"] {
        assert!(text.contains(sub), "help lists {sub}");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(qtlab(&["calibrate", "--out", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(qtlab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(qtlab(&["calibrate"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = qtlab(&["calibrate", "--out", out_dir(dir.path()), "--bits", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = qtlab(&["calibrate", "--out", out_dir(dir.path()), "model.heads=3"]);
    assert_eq!(o.status.code(), Some(1));
    let o = qtlab(&["quantize-eval", "--out", out_dir(dir.path()), "--checkpoint", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn calibrate_records_fine_percentile() {
    let dir = tempfile::tempdir().unwrap();
    let o = qtlab(&[
        "calibrate", "--out", out_dir(dir.path()), "--method", "percentile", "--p", "0.99999", "--bits", "8",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = read_json(&dir.path().join("calibration.json"));
    let records = records.as_array().unwrap();
    assert!(!records.is_empty());
    for r in records {
        assert_eq!(r["method"], "percentile");
        assert_eq!(r["param"].as_f64(), Some(0.99999));
        assert_eq!(r["bits"], 8);
    }
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "calibrate");
    assert!(manifest["created_unix"].as_u64().is_some());
}

#[test]
fn pipeline_summary_matches_schema_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = qtlab(&["pipeline", "--out", out_dir(d.path()), "--seed", "3"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let schema = read_json(&a.path().join("summary.schema.json"));
    let summary = read_json(&a.path().join("summary.json"));
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&summary).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    let manifest = read_json(&a.path().join("manifest.json"));
    let files = manifest["files"].as_array().unwrap();
    assert!(files.len() > 10);
    let mut compared = 0;
    for f in files {
        let rel = f.as_str().unwrap();
        if rel.ends_with('/') {
            continue;
        }
        assert_eq!(
            fs::read(a.path().join(rel)).unwrap(),
            fs::read(b.path().join(rel)).unwrap(),
            "{rel} differs between identical runs"
        );
        compared += 1;
    }
    assert!(compared > 10);
    for ck in ["alpha0", "regularized", "pretrained"] {
        let dir = format!("checkpoints/{ck}");
        for entry in fs::read_dir(a.path().join(&dir)).unwrap() {
            let name = entry.unwrap().file_name();
            let rel = Path::new(&dir).join(name);
            assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap());
        }
    }
    let results = fs::read_to_string(a.path().join("results.csv")).unwrap();
    // 2 arms × 4 methods × 3 widths, plus the header.
    assert_eq!(results.lines().count(), 1 + 2 * 4 * 3);
}

#[test]
fn zero_steps_gives_calibration_only_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = qtlab(&["pipeline", "--out", out_dir(dir.path()), "--steps", "0", "pretrain.steps=0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(&dir.path().join("summary.json"));
    for arm in summary["arms"].as_array().unwrap() {
        assert_eq!(arm["steps"], 0);
    }
    assert_eq!(fs::read_to_string(dir.path().join("logs/alpha0.ndjson")).unwrap(), "");
}

#[test]
fn subcommands_chain_through_checkpoints() {
    let root = tempfile::tempdir().unwrap();
    let p = |s: &str| root.path().join(s).to_str().unwrap().to_string();
    let run = |args: &[&str]| {
        let o = qtlab(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["train", "--out", &p("train"), "--steps", "20"]);
    run(&[
        "finetune", "--out", &p("ft"), "--checkpoint", &p("train/checkpoint"), "--steps", "5", "--alpha", "0.5",
        "--schedule", "cosine", "--inject", "10",
    ]);
    assert!(root.path().join("ft/injection.json").exists());
    let log = fs::read_to_string(root.path().join("ft/logs/finetune.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 5);
    run(&["calibrate", "--out", &p("cal"), "--checkpoint", &p("ft/checkpoint"), "--method", "omse", "--bits", "7"]);
    run(&["sweep", "--out", &p("sweep"), "--checkpoint", &p("ft/checkpoint"), "--batches", "4", "--batch-size", "50"]);
    run(&["analyze", "--out", &p("an"), "--checkpoint", &p("ft/checkpoint"), "--method", "ema"]);
    run(&["quantize-eval", "--out", &p("qe"), "--checkpoint", &p("cal/checkpoint"), "--bits", "6"]);
    let ev = read_json(&root.path().join("qe/eval.json"));
    assert_eq!(ev["bits"], 6);
    let drop = ev["accuracy_drop"].as_f64().unwrap();
    assert!((ev["fp_accuracy"].as_f64().unwrap() - ev["quant_accuracy"].as_f64().unwrap() - drop).abs() < 1e-12);
    let sweep = fs::read_to_string(root.path().join("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 11);
    let ranges = fs::read_to_string(root.path().join("an/dynamic_range.csv")).unwrap();
    assert_eq!(ranges.lines().count(), 1 + 2);
}

#[test]
fn threads_env_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_qtlab"))
        .args(["calibrate", "--out", out_dir(dir.path())])
        .env("QTLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
