use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fcdd_core::store::{Store, FAULT_ENV};

fn fcdd(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcdd"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = fcdd(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap().trim().to_string()
}

fn run_file(out: &Path, run: &str, rel: &str) -> PathBuf {
    out.join("runs").join(run).join(rel)
}

/// A small positioned synthetic dataset; returns its manifest path.
fn dataset(out: &Path) -> PathBuf {
    let id = ok(out, &["synth", "--normal", "16", "--anomalous", "8", "--spacing", "0.3"]);
    run_file(out, &id, "manifest.jsonl")
}

#[test]
fn same_seed_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&dir.path().join("data"));
    let data = data.to_str().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let id = ok(&out, &["--seed", "5", "train", "--manifest", data, "--epochs", "1"]);
        let read = |rel: &str| std::fs::read(run_file(&out, &id, rel)).unwrap();
        outputs.push((read("metrics.json"), read("scores.csv"), read("threshold.json"), read("weights.bin")));
        let store = Store::open(&out).unwrap();
        let rec = store.record(&id).unwrap();
        store.verify(&rec).unwrap();
        for role in ["manifest", "weights", "training_log", "threshold", "scores", "metrics", "histogram"] {
            assert!(rec.artifact(role).is_some(), "{role}");
        }
    }
    assert!(outputs[0] == outputs[1]);
}

#[test]
fn score_history_and_prognose_chain() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let data = dataset(out);
    let train = ok(out, &["train", "--manifest", data.to_str().unwrap(), "--epochs", "1"]);
    let scored = ok(out, &["score", "--run", &train]);
    let header = std::fs::read_to_string(run_file(out, &scored, "scores.csv")).unwrap();
    assert!(header.starts_with("run_id,frame_id,position_m,raw_score,risk_weight,risk_weighted_score"));
    ok(out, &["history", "--run", &scored, "--date", "2026-03-01"]);
    let before = std::fs::read_dir(out.join("history")).unwrap().count();
    ok(out, &["history", "--run", &scored, "--date", "2026-03-01"]);
    assert_eq!(std::fs::read_dir(out.join("history")).unwrap().count(), before);
    let later = ok(out, &["score", "--run", &train]);
    ok(out, &["history", "--run", &later, "--date", "2026-04-01"]);
    let err = fcdd(out, &["history", "--run", &later, "--date", "2026-02-01"]);
    assert!(!err.status.success());
    let p = ok(out, &["prognose", "--bucket", "0"]);
    let trend = std::fs::read_to_string(run_file(out, &p, "tables/trend.csv")).unwrap();
    assert_eq!(trend.lines().count(), 2);
    let h = ok(out, &["heatmap", "--run", &train, "--limit", "2", "--raw"]);
    let maps = std::fs::read_dir(run_file(out, &h, "heatmaps")).unwrap().count();
    assert_eq!(maps, 2 * 3 + 1);
}

#[test]
fn crash_between_row_and_index_is_recoverable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let data = dataset(out);
    let train = ok(out, &["train", "--manifest", data.to_str().unwrap(), "--epochs", "1"]);
    let scored = ok(out, &["score", "--run", &train]);
    let crashed = Command::new(env!("CARGO_BIN_EXE_fcdd"))
        .env(FAULT_ENV, "after-data-write")
        .arg("--out")
        .arg(out)
        .args(["history", "--run", &scored, "--date", "2026-03-01"])
        .output()
        .unwrap();
    assert!(!crashed.status.success());
    assert!(out.join(".lock").exists(), "the killed writer leaves its lock behind");
    let rows = |out: &Path| -> usize {
        std::fs::read_dir(out.join("history"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .map(|p| std::fs::read_to_string(p).unwrap().lines().count() - 1)
            .sum()
    };
    assert_eq!(rows(out), 1, "one row reached disk before the crash");
    ok(out, &["history", "--run", &scored, "--date", "2026-03-01"]);
    let store = Store::open(out).unwrap();
    let hist = store.history(0.6).unwrap();
    assert_eq!(rows(out), hist.buckets.len());
    assert!(hist.buckets.values().all(|e| e.len() == 1));
    let index = std::fs::read_to_string(out.join("history/index.jsonl")).unwrap();
    assert_eq!(index.lines().count(), hist.buckets.len());
}

#[test]
fn ablation_writes_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let data = dataset(out);
    let args = [
        "ablate", "--axis", "imbalance", "--settings", "1:1,2:1", "--manifest", data.to_str().unwrap(),
        "--normal-unit", "4", "--epochs", "1",
    ];
    let id = ok(out, &args);
    let csv = std::fs::read_to_string(run_file(out, &id, "tables/ablation.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "setting,AUC,F1,Precision,Recall");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1:1,") && lines[2].starts_with("2:1,"));
    assert!(std::fs::read_to_string(run_file(out, &id, "tables/ablation.txt")).unwrap().contains('*'));
}

#[test]
fn errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = fcdd(dir.path(), &["frobnicate"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = fcdd(dir.path(), &["evaluate", "--run", "missing"]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"], "store");
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nbatch_size = 0\n").unwrap();
    let o = fcdd(dir.path(), &["--config", cfg.to_str().unwrap(), "prognose"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"], "config_field");
    assert!(v["message"].as_str().unwrap().contains("train.batch_size"));
}
