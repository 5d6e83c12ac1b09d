use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use slacc::tensor::Tensor;

const TINY: &str = r#"{
    "devices": 2,
    "rounds": 3,
    "batch_size": 6,
    "lr": 0.05,
    "dataset": {"kind": "synthetic", "classes": 3, "train_per_class": 8, "test_per_class": 4, "noise": 0.2, "side": 6},
    "model": {"client_channels": [3, 4], "kernel": 3, "hidden": 8}
}"#;

fn slacc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slacc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn slacc")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(String::from_utf8_lossy(&o.stdout).lines().last().unwrap()).unwrap()
}

#[test]
fn train_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = slacc(&["train", "--config", &cfg, "--out", "run", "--compressor", "uniform:4"], dir.path());
    let v = stdout_json(&o);
    assert!(v["total_bytes"].as_u64().unwrap() > 0);
    let jsonl = std::fs::read_to_string(dir.path().join("run/reports.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 3);
    let ledger = std::fs::read_to_string(dir.path().join("run/ledger.csv")).unwrap();
    assert_eq!(ledger.lines().next().unwrap(), "round,device,direction,bytes,sim_seconds");
    assert_eq!(ledger.lines().count(), 1 + 3 * 2 * 2);
}

#[test]
fn overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = slacc(&["train", "--config", &cfg, "--rounds", "2", "--devices", "3", "--out", "r"], dir.path());
    stdout_json(&o);
    let jsonl = std::fs::read_to_string(dir.path().join("r/reports.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
    let first: Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first["uplink"].as_array().unwrap().len(), 3);
}

#[test]
fn compress_bench_reports_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f64> = (0..2 * 4 * 5 * 5).map(|i| ((i * 31) % 23) as f64 / 7.0 - 1.0).collect();
    let t = Tensor::new(vec![2, 4, 5, 5], data).unwrap();
    let path = dir.path().join("t.slt1");
    t.write_slt1(&path).unwrap();
    let p = path.display().to_string();
    let o = slacc(&["compress-bench", &p, "--g", "2", "--bmin", "2", "--bmax", "6", "--out", "blob.slc1"], dir.path());
    let v = stdout_json(&o);
    for key in ["raw_bytes", "compressed_bytes", "ratio", "max_abs_err", "mse"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    let blob = std::fs::read(dir.path().join("blob.slc1")).unwrap();
    assert_eq!(blob.len() as u64, v["compressed_bytes"].as_u64().unwrap());
    assert_eq!(&blob[..4], b"SLC1");
    assert!(v["ratio"].as_f64().unwrap() > 1.0);
    let bits = v["per_group_bits"].as_array().unwrap();
    assert!(bits.iter().all(|b| (2..=6).contains(&b.as_u64().unwrap())));

    let o = slacc(&["compress-bench", &p, "--compressor", "uniform:8"], dir.path());
    assert!(stdout_json(&o)["max_abs_err"].as_f64().unwrap() <= 2.0 / 255.0 * 1.5);
}

#[test]
fn inspect_entropy_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = slacc(&["inspect-entropy", "--config", &cfg, "--out", "trace.csv", "--gradients"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "round,channel,h_inst,h_hist,alpha,h_blend");
    assert_eq!(lines.count(), 3 * 4);
}

#[test]
fn compare_runs_each_compressor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = slacc(&["compare", "--config", &cfg, "--rounds", "2", "--out", "cmp", "--targets", "0.5"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    let csv = std::fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * 2);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"devices": 0}"#).unwrap();
    let o = slacc(&["train", "--config", "bad.json"], dir.path());
    assert!(!o.status.success());
    std::fs::write(dir.path().join("typo.json"), r#"{"roundz": 3}"#).unwrap();
    assert!(!slacc(&["train", "--config", "typo.json"], dir.path()).status.success());
    assert!(!slacc(&["train", "--compressor", "gzip"], dir.path()).status.success());
    assert!(!slacc(&["compress-bench", "missing.slt1"], dir.path()).status.success());
}
