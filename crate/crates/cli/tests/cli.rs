mod common;

use std::process::Command;

use common::{fixture, s};
use objscale_cli::{run, EXIT_OK, EXIT_USER};
use objscale_core::scalenet::ScaleSample;
use objscale_core::scenegen::load_bundle;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_objscale"))
}

#[test]
fn help_and_usage_errors() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    for sub in ["synth", "bootstrap", "train", "sample", "render", "oracle", "eval", "bench", "serve"] {
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert_eq!(out.status.code(), Some(EXIT_OK), "{sub} --help");
    }
    let out = bin().args(["synth", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USER));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(EXIT_USER));
}

#[test]
fn missing_inputs_are_user_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = dir.path().join("o.json");
    assert_eq!(run(["objscale", "sample", "--ckpt", &s(&missing), "--out", &s(&out)]), EXIT_USER);
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a model").unwrap();
    assert_eq!(run(["objscale", "sample", "--ckpt", &s(&garbage), "--out", &s(&out)]), EXIT_USER);
}

#[test]
fn synth_writes_a_loadable_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    let code = run(["objscale", "synth", "--seed", "7", "--objects", "3", "--frames", "5", "--size", "24", "--out", &s(&out)]);
    assert_eq!(code, EXIT_OK);
    let b = load_bundle(&out).unwrap();
    assert_eq!((b.num_objects(), b.num_frames(), b.manifest.width), (3, 5, 24));
}

#[test]
fn workflow_commands() {
    let fx = fixture(2);
    let d = fx.dir.path();

    let samples = d.join("samples.json");
    let code = run([
        "objscale", "sample", "--ckpt", &s(&fx.ckpt), "--count", "25", "--threshold", "0.05", "--out", &s(&samples),
    ]);
    assert_eq!(code, EXIT_OK);
    let got: Vec<ScaleSample> = serde_json::from_str(&std::fs::read_to_string(&samples).unwrap()).unwrap();
    assert_eq!(got.len(), 25);
    assert!(got.iter().all(|x| x.score > 0.05 && x.scales.normalized[0] == 1.0));

    let png = d.join("view.png");
    let code = run([
        "objscale", "render", "--ckpt", &s(&fx.ckpt), "--scene", &s(&fx.scene), "--scales", "1,0.3", "--frame", "2", "--out",
        &s(&png),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(&std::fs::read(&png).unwrap()[..4], b"\x89PNG");
    let bad = run([
        "objscale", "render", "--ckpt", &s(&fx.ckpt), "--scene", &s(&fx.scene), "--scales", "1,0.3,0.2", "--out", &s(&png),
    ]);
    assert_eq!(bad, EXIT_USER);

    let oracle = d.join("oracle.json");
    let code = run([
        "objscale", "oracle", "--scene", &s(&fx.scene), "--res", "11", "--ckpt", &s(&fx.ckpt), "--out", &s(&oracle),
    ]);
    assert_eq!(code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&oracle).unwrap()).unwrap();
    assert_eq!(v["grid"]["valid"].as_array().unwrap().len(), 11);

    let bench = d.join("bench.csv");
    let code = run([
        "objscale", "bench", "--ckpt", &s(&fx.ckpt), "--scene", &s(&fx.scene), "--hs", "1,4", "--rays", "16", "--repeats",
        "1", "--out", &s(&bench),
    ]);
    assert_eq!(code, EXIT_OK);
    let csv = std::fs::read_to_string(&bench).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().split(',').nth(5).unwrap() == "4");

    let boot = d.join("boot.ckpt");
    let cfg = d.join("train.json");
    let code = run(["objscale", "bootstrap", "--scene", &s(&fx.scene), "--config", &s(&cfg), "--out", &s(&boot)]);
    assert_eq!(code, EXIT_OK);
    assert!(objscale_core::Checkpoint::load(&boot).is_ok());
}

#[test]
fn eval_writes_report_and_table() {
    let fx = fixture(2);
    let d = fx.dir.path();
    let cfg = d.join("eval.json");
    std::fs::write(&cfg, r#"{"n":3,"gt_configs":2,"validity_threshold":0.05,"oracle_resolution":11}"#).unwrap();
    let (out, csv) = (d.join("report.json"), d.join("table.csv"));
    let code = run([
        "objscale", "eval", "--ckpt", &s(&fx.ckpt), "--scene", &s(&fx.scene), "--config", &s(&cfg), "--out", &s(&out),
        "--csv", &s(&csv),
    ]);
    assert_eq!(code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["n"], 3);
    assert!(v["oracle"]["iou"].is_number());
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 2 * 2);
}
