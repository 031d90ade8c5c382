use std::path::Path;
use std::process::{Command, Output};

use gmlp::checkpoint::Checkpoint;
use serde_json::Value;

const ARCH: &str = "GSel-4-2, GFC, ReLU, BNorm, Concat, FC-2";

fn gmlp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmlp"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GMLP_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Synthetic data in `dir/data` and a short training config in `dir/run.cfg`.
fn workspace(epochs: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    json(&gmlp(&["synth", "--n", "600", "--seed", "2", "--out", "data"], dir.path()));
    std::fs::write(
        dir.path().join("run.cfg"),
        format!("arch = {ARCH}\ntrain_data = data/train.csv\ntest_data = data/test.csv\nepochs = {epochs}\nseed = 3\n"),
    )
    .unwrap();
    dir
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gmlp(&["--help"], dir.path())), 0);
    assert_eq!(code(&gmlp(&["train", "--help"], dir.path())), 0);
    assert_eq!(code(&gmlp(&["train", "--bogus"], dir.path())), 1);
    assert_eq!(code(&gmlp(&["complexity", "--arch", "GSel-4"], dir.path())), 1);
    std::fs::write(dir.path().join("bad.cfg"), "epochs = many\n").unwrap();
    assert_eq!(code(&gmlp(&["train", "--config", "bad.cfg"], dir.path())), 1);
    std::fs::write(dir.path().join("unknown.cfg"), "colour = blue\n").unwrap();
    assert_eq!(code(&gmlp(&["train", "--config", "unknown.cfg"], dir.path())), 1);
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = workspace(1);
    let missing = gmlp(&["train", "--config", "run.cfg", "--set", "train_data=data/nope.csv"], dir.path());
    assert_eq!(code(&missing), 2, "{}", String::from_utf8_lossy(&missing.stderr));
    assert_eq!(code(&gmlp(&["train", "--config", "absent.cfg"], dir.path())), 2);

    json(&gmlp(&["train", "--config", "run.cfg", "--out", "run"], dir.path()));
    std::fs::write(dir.path().join("narrow.csv"), "a,b,y\n0,1,0\n1,0,1\n").unwrap();
    let mismatch = gmlp(&["eval", "--checkpoint", "run/final.ckpt", "--data", "narrow.csv"], dir.path());
    assert_eq!(code(&mismatch), 2);
}

#[test]
fn complexity_of_the_reference_network() {
    let dir = tempfile::tempdir().unwrap();
    let report = json(&gmlp(&["complexity", "--arch", ARCH, "--d", "6"], dir.path()));
    assert_eq!(report["predict_ops"], 32.0);
    assert_eq!(report["density"], "1/4");
}

#[test]
fn synth_writes_data_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let report = json(&gmlp(&["synth", "--n", "500", "--seed", "1", "--out", "s"], dir.path()));
    assert_eq!(report["samples"], 500);
    let rows = report["train_rows"].as_u64().unwrap() + report["test_rows"].as_u64().unwrap();
    assert_eq!(rows, 500);
    assert!((report["optimal_accuracy"].as_f64().unwrap() - 0.93663).abs() < 1e-4);
    for file in ["train.csv", "test.csv", "oracle.json"] {
        assert!(dir.path().join("s").join(file).is_file(), "{file}");
    }
    let header = std::fs::read_to_string(dir.path().join("s/train.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap().split(',').count(), 7);
}

#[test]
fn zero_epochs_saves_the_untrained_model() {
    let dir = workspace(0);
    json(&gmlp(&["train", "--config", "run.cfg", "--out", "run"], dir.path()));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    let final_ckpt = Checkpoint::load(&dir.path().join("run/final.ckpt")).unwrap();
    let best = Checkpoint::load(&dir.path().join("run/best.ckpt")).unwrap();
    assert!(final_ckpt.model == best.model, "final and best hold different models");
}

#[test]
fn output_dir_comes_from_the_environment() {
    let dir = workspace(1);
    let out = Command::new(env!("CARGO_BIN_EXE_gmlp"))
        .args(["train", "--config", "run.cfg"])
        .current_dir(dir.path())
        .env("GMLP_OUTPUT_DIR", "from-env")
        .output()
        .unwrap();
    json(&out);
    assert!(dir.path().join("from-env/final.ckpt").is_file());
}

#[test]
fn saved_checkpoint_reproduces_training_accuracy() {
    let dir = workspace(20);
    let summary = json(&gmlp(&["train", "--config", "run.cfg", "--out", "run"], dir.path()));
    let report = json(&gmlp(
        &["eval", "--checkpoint", "run/final.ckpt", "--data", "data/test.csv", "--hard-routing"],
        dir.path(),
    ));
    let close = |a: &Value, b: &Value| (a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-9;
    assert!(close(&summary["final_test_accuracy"], &report["accuracy"]), "{summary} vs {report}");
    assert!(close(&summary["final_test_accuracy_hard"], &report["hard_routing_accuracy"]));

    let analysis = json(&gmlp(
        &["analyze", "--checkpoint", "run/final.ckpt", "--data", "data/test.csv"],
        dir.path(),
    ));
    assert_eq!(analysis["slot_to_feature"].as_array().unwrap().len(), 8);
    for file in ["heatmap.csv", "group_graph.csv", "correlation_histograms.csv", "analysis.json"] {
        assert!(dir.path().join("run/analysis").join(file).is_file(), "{file}");
    }
}
