use std::path::Path;
use std::process::{Command, Output};

use fedvgcn::graph::synthetic::{write_planetoid, SyntheticConfig};

fn fedvgcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedvgcn")).args(args).output().expect("binary runs")
}

fn dataset(dir: &Path) {
    let d =
        SyntheticConfig { name: "cora".into(), num_nodes: 40, num_classes: 3, feature_dim: 16, ..Default::default() }
            .generate(2);
    write_planetoid(&d, dir).unwrap();
}

#[test]
fn run_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let data = dir.path().to_str().unwrap();
    let out = dir.path().join("runs.jsonl");
    for setting in ["isolated_b", "combined"] {
        let o = fedvgcn(&[
            "run",
            "--dataset",
            data,
            "--name",
            "cora",
            "--setting",
            setting,
            "--epochs",
            "2",
            "--folds",
            "1",
            "--hidden",
            "4",
            "--learning-rate",
            "0.01",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = fedvgcn(&["compare", out.to_str().unwrap()]);
    assert!(o.status.success());
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("GraphSage_B") && table.contains("GraphSage_A+B") && table.contains("(0.7080)"), "{table}");
}

#[test]
fn stats_reports_reference_drift() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let o = fedvgcn(&["stats", "--dataset", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("differs from 2708 nodes"), "{text}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().to_str().unwrap();
    let code = |args: &[&str]| fedvgcn(args).status.code();
    assert_eq!(code(&["run", "--dataset", data, "--name", "cora"]), Some(3));
    assert_eq!(code(&["stats", "--dataset", "/nonexistent/dir"]), Some(3));
    assert_eq!(code(&["run", "--dataset", data, "--dropout", "1.5"]), Some(2));
    assert_eq!(code(&["run", "--dataset", data, "--setting", "both"]), Some(2));
    assert_eq!(code(&["run"]), Some(2));
    let garbage = dir.path().join("bad.jsonl");
    std::fs::write(&garbage, "not json\n").unwrap();
    assert_eq!(code(&["compare", garbage.to_str().unwrap()]), Some(3));
}
