use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn camp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camp")).args(args).output().expect("spawn camp")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_config() -> Value {
    json!({
        "schema_version": 1,
        "seed": 4,
        "dataset": {"kind": "synthetic-blobs", "classes": 3, "samples": 180, "features": 5, "spread": 1.5},
        "model": {"kind": "mlp", "hidden": [12]},
        "train": {"epochs": 4, "lr": 0.05, "batch_size": 16},
        "prune": {"strategy": "camp-hive", "p": 50},
        "finetune": {"epochs": 2, "lr": 0.05},
        "probe": {"samples": 32, "latency_repeats": 3}
    })
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, value.to_string()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn without_timing(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timing");
    v
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&camp(&[])), 1);
    assert_eq!(code(&camp(&["frobnicate"])), 1);
    assert_eq!(code(&camp(&["--help"])), 0);

    let mut config = small_config();
    config.as_object_mut().unwrap().remove("seed");
    let path = write_config(dir.path(), &config);
    let out = camp(&["pipeline", "--config", s(&path)]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    // Supplying the seed on the command line fixes it.
    let report = dir.path().join("r.json");
    assert_eq!(code(&camp(&["pipeline", "--config", s(&path), "--seed", "2", "--report", s(&report)])), 0);

    let mut config = small_config();
    config["prune"]["p"] = json!(150);
    let path = write_config(dir.path(), &config);
    assert_eq!(code(&camp(&["pipeline", "--config", s(&path)])), 1);

    let mut config = small_config();
    config["surprise"] = json!(true);
    let path = write_config(dir.path(), &config);
    assert_eq!(code(&camp(&["train", "--config", s(&path), "-o", "x"])), 1);

    fs::write(&path, "{ not json").unwrap();
    assert_eq!(code(&camp(&["train", "--config", s(&path), "-o", "x"])), 1);
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&camp(&["train", "--config", s(&missing), "-o", "x"])), 3);

    let path = write_config(dir.path(), &small_config());
    let out = camp(&["eval", "--config", s(&path), "--checkpoint", s(&dir.path().join("absent.ckpt"))]);
    assert_eq!(code(&out), 3);

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"NOTCAMP!\x00\x00\x00\x00").unwrap();
    assert_eq!(code(&camp(&["eval", "--config", s(&path), "--checkpoint", s(&garbage)])), 3);

    let mut config = small_config();
    config["dataset"] = json!({"kind": "csv", "path": s(&dir.path().join("missing.csv"))});
    let path = write_config(dir.path(), &config);
    let report = dir.path().join("partial.json");
    assert_eq!(code(&camp(&["pipeline", "--config", s(&path), "--report", s(&report)])), 3);
    let partial: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(partial["complete"], json!(false));
    assert_eq!(partial["failed_stage"], json!("data"));
}

#[test]
fn numeric_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config();
    config["precision"] = json!("f32");
    config["model"]["hidden"] = json!([]);
    config["train"]["lr"] = json!(1e30);
    let path = write_config(dir.path(), &config);
    let report = dir.path().join("partial.json");
    let out = camp(&["pipeline", "--config", s(&path), "--report", s(&report)]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let partial: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(partial["complete"], json!(false));
    assert!(partial["baseline"].is_object());
}

#[test]
fn train_prune_eval_stats_chain() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let base = dir.path().join("base.ckpt");
    let pruned = dir.path().join("pruned.ckpt");
    let prune_report = dir.path().join("prune.json");
    let stats = dir.path().join("stats.csv");

    let out = camp(&["train", "--config", s(&config), "-o", s(&base)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(&fs::read(&base).unwrap()[..8], b"CAMPNET1");

    let out = camp(&[
        "prune", "--config", s(&config), "--checkpoint", s(&base), "-o", s(&pruned), "--report", s(&prune_report),
        "--strategy", "magnitude", "--p", "40",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(&prune_report).unwrap()).unwrap();
    assert_eq!(report["strategy"], json!("magnitude"));
    let sparsity = report["total_sparsity"].as_f64().unwrap();
    assert!((sparsity - 0.4).abs() < 0.02, "{sparsity}");

    let out = camp(&["eval", "--config", s(&config), "--checkpoint", s(&pruned), "--baseline", s(&base)]);
    assert_eq!(code(&out), 0);
    let acc: Value = serde_json::from_slice(&out.stdout).unwrap();
    let delta = acc["delta_acc"].as_f64().unwrap();
    let expect = acc["pruned"]["top1"].as_f64().unwrap() - acc["baseline"]["top1"].as_f64().unwrap();
    assert!((delta - expect).abs() < 1e-9);

    let out = camp(&["stats", "--config", s(&config), "--base", s(&base), "--pruned", s(&pruned), "-o", s(&stats)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&stats).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    for col in ["layer", "min", "max", "mean", "mad"] {
        assert!(header.split(',').any(|h| h.contains(col)), "{header}");
    }
    assert!(lines.count() >= 1);

    // A checkpoint that does not fit the dataset is a usage error.
    let mut other = small_config();
    other["dataset"]["features"] = json!(7);
    let other = write_config(dir.path(), &other);
    let out = camp(&["eval", "--config", s(&other), "--checkpoint", s(&base)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn pipeline_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let probe = dir.path().join("probe.csv");
    for path in [&a, &b] {
        let out = camp(&["pipeline", "--config", s(&config), "--report", s(path), "--probe-csv", s(&probe)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(without_timing(&a), without_timing(&b));
    let report = without_timing(&a);
    assert_eq!(report["complete"], json!(true));
    assert_eq!(report["config"]["seed"], json!(4));
    assert!(fs::read_to_string(&probe).unwrap().lines().count() >= 2);

    let c = dir.path().join("c.json");
    assert_eq!(code(&camp(&["pipeline", "--config", s(&config), "--seed", "5", "--report", s(&c)])), 0);
    let other = without_timing(&c);
    assert_eq!(other["config"]["seed"], json!(5));
    assert_ne!(other["train_loss"], report["train_loss"]);
}

#[test]
fn compare_writes_one_row_per_strategy_and_percentile() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let csv = dir.path().join("table.csv");
    let json_out = dir.path().join("table.json");
    let out = camp(&[
        "compare", "--config", s(&config), "--strategies", "camp-hive,magnitude", "--p", "30,60", "--seeds", "1,2",
        "-o", s(&csv), "--json", s(&json_out),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].contains("mean_acc") && lines[0].contains("std_acc"));
    let table: Value = serde_json::from_str(&fs::read_to_string(&json_out).unwrap()).unwrap();
    assert_eq!(table["samples"].as_array().unwrap().len(), 8);

    let out = camp(&["compare", "--config", s(&config), "--strategies", "bogus"]);
    assert_eq!(code(&out), 1);
}
