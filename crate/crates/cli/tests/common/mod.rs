#![allow(dead_code)]

use std::path::PathBuf;

use objscale_cli::run;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub scene: PathBuf,
    pub ckpt: PathBuf,
}

pub fn s(p: &std::path::Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Small scene with a briefly trained model, built through the CLI.
pub fn fixture(objects: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let ckpt = dir.path().join("model.ckpt");
    let cfg = dir.path().join("train.json");
    std::fs::write(
        &cfg,
        r#"{"rounds":1,"stage1_iters":5,"scalenet_iters":20,"field_iters":3,"rays_per_batch":32,
            "label_rays":32,"h":4,"samples_per_ray":12,"composite_samples":16,"resolution":8,
            "upsample_at":[],"ramp_start":0.05,"validity_threshold":0.06}"#,
    )
    .unwrap();
    let objects = objects.to_string();
    let code = run([
        "objscale", "synth", "--seed", "3", "--objects", &objects, "--frames", "11", "--size", "16", "--out", &s(&scene),
    ]);
    assert_eq!(code, 0);
    let code = run([
        "objscale", "train", "--scene", &s(&scene), "--config", &s(&cfg), "--deterministic", "--out", &s(&ckpt),
    ]);
    assert_eq!(code, 0);
    Fixture { dir, scene, ckpt }
}
