use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evfuse::tracker::{ModelConfig, TrackerModel};

fn evfuse(args: &[&str], paths: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evfuse"));
    cmd.args(args).args(paths);
    cmd.output().unwrap()
}

fn ok(args: &[&str], paths: &[&Path]) -> String {
    let out = evfuse(args, paths);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn single_error_line(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    err
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        } else {
            out.insert(p.clone(), std::fs::read(&p).unwrap());
        }
    }
    out
}

fn simulated(root: &Path, kind: &str) -> PathBuf {
    let seq = root.join(kind);
    ok(&["simulate", "--scenario", kind, "--seed", "7", "--out"], &[&seq]);
    seq
}

#[test]
fn version_prints_a_build_identifier() {
    let out = ok(&["--version"], &[]);
    assert!(out.starts_with("evfuse "), "{out}");
}

#[test]
fn usage_errors_are_one_line() {
    let e = single_error_line(&evfuse(&["simulate", "--bogus"], &[]));
    assert!(e.contains("--bogus"));
    single_error_line(&evfuse(&["simulate", "--scenario", "nm", "--out", "x"], &[]));
    single_error_line(&evfuse(&["frobnicate"], &[]));
    single_error_line(&evfuse(&["gradcheck", "--op", "no_such_op"], &[]));
}

#[test]
fn missing_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let e = single_error_line(&evfuse(&["aggregate", "--mode", "a", "--gamma-e", "240", "--in"], &[&dir.path().join("nope")]));
    assert!(e.contains("nope"));
    let e = single_error_line(&evfuse(&["train", "--out", "m.json", "--config"], &[&dir.path().join("cfg.json")]));
    assert!(e.contains("cfg.json"));
}

#[test]
fn gradcheck_lists_the_selected_op() {
    let out = ok(&["gradcheck", "--op", "sigmoid"], &[]);
    assert!(out.lines().next().unwrap().starts_with("sigmoid"));
    assert!(out.contains(" ok"));
}

#[test]
fn evaluate_perfect_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let seq = simulated(dir.path(), "nm");
    let out = dir.path().join("eval");
    ok(&["evaluate", "--pred"], &[&seq.join("groundtruth.csv"), Path::new("--gt"), &seq, Path::new("--out"), &out]);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("groundtruth.metrics.json")).unwrap()).unwrap();
    assert_eq!(json["rsr"].as_f64().unwrap(), 20.0 / 21.0);
    assert_eq!(json["rpr"].as_f64().unwrap(), 1.0);
    assert!(json["attributes"]["nm"].is_object());
    let curve = std::fs::read_to_string(out.join("groundtruth.success.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("threshold,value"));
    assert_eq!(curve.lines().count(), 22);
    let precision = std::fs::read_to_string(out.join("groundtruth.precision.csv")).unwrap();
    assert_eq!(precision.lines().count(), 52);
}

#[test]
fn schedule_and_fusion_mismatches_fail() {
    let dir = tempfile::tempdir().unwrap();
    let seq = simulated(dir.path(), "plain");
    let e = single_error_line(&evfuse(&["aggregate", "--mode", "a", "--gamma-e", "250", "--in"], &[&seq]));
    assert!(e.contains("rate"), "{e}");
    let ckpt = dir.path().join("model.json");
    TrackerModel::init(ModelConfig::default(), 0).unwrap().save(&ckpt).unwrap();
    let e = single_error_line(&evfuse(&["track", "--fusion", "ef", "--mode", "a", "--ckpt"], &[&ckpt, Path::new("--in"), &seq]));
    assert!(e.contains("afnet"), "{e}");
    let e = single_error_line(&evfuse(&["track", "--fusion", "late", "--mode", "a", "--ckpt"], &[&ckpt, Path::new("--in"), &seq]));
    assert!(e.contains("late"), "{e}");
}

#[test]
fn train_requires_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 1}"#).unwrap();
    let e = single_error_line(&evfuse(&["train", "--out"], &[&dir.path().join("m.json"), Path::new("--config"), &cfg]));
    assert!(e.contains("seed"), "{e}");
    std::fs::write(&cfg, r#"{"seed": 1, "epoch": 1}"#).unwrap();
    single_error_line(&evfuse(&["train", "--out"], &[&dir.path().join("m.json"), Path::new("--config"), &cfg]));
}

#[test]
fn subcommands_leave_their_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let seq = simulated(dir.path(), "sbm");
    let ckpt = dir.path().join("model.json");
    TrackerModel::init(ModelConfig::default(), 0).unwrap().save(&ckpt).unwrap();
    let before = (tree(&seq), std::fs::read(&ckpt).unwrap());
    ok(&["aggregate", "--mode", "b", "--gamma-e", "120", "--in"], &[&seq]);
    let frames = dir.path().join("sbm.events-b-120");
    assert_eq!(tree(&frames).len(), 8 * 6 + 1);
    let csv = ok(&["track", "--fusion", "frame-only", "--mode", "b", "--ckpt"], &[&ckpt, Path::new("--in"), &seq]);
    assert_eq!(csv.lines().count(), 1 + 96);
    let pred = dir.path().join("pred.csv");
    std::fs::write(&pred, &csv).unwrap();
    ok(&["evaluate", "--interpolate-from-rate", "20", "--pred"], &[&pred, Path::new("--gt"), &seq]);
    assert!(dir.path().join("pred.interp20.metrics.json").exists());
    assert_eq!(before, (tree(&seq), std::fs::read(&ckpt).unwrap()));
    assert_eq!(std::fs::read_to_string(&pred).unwrap(), csv);
}

#[test]
fn report_needs_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let e = single_error_line(&evfuse(&["report", "--runs"], &[dir.path()]));
    assert!(e.contains("metrics"), "{e}");
}
