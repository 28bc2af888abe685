use objscale_core::checkpoint::Checkpoint;
use objscale_core::compositor::LossWeights;
use objscale_core::scalenet::ScaleMlp;
use objscale_core::scenegen::*;
use objscale_core::trainer::*;

fn small_bundle(objects: usize) -> SceneBundle {
    let params = SceneParams {
        objects,
        frames: 6,
        width: 32,
        height: 32,
        ..SceneParams::default()
    };
    synthesize(&params).unwrap().0
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        rounds: 2,
        stage1_iters: 6,
        scalenet_iters: 5,
        field_iters: 4,
        rays_per_batch: 64,
        label_rays: 64,
        h: 8,
        samples_per_ray: 16,
        composite_samples: 24,
        resolution: 8,
        upsample_at: vec![3],
        deterministic: true,
        ..TrainConfig::default()
    }
}

fn strip_seconds(r: &mut TrainReport) {
    r.seconds = 0.0;
    if let Some(s) = r.stage1.as_mut() {
        s.seconds = 0.0;
    }
    for round in &mut r.stage2.rounds {
        round.scalenet.seconds = 0.0;
        round.fields.seconds = 0.0;
    }
}

fn params_of(fields: &[objscale_core::objectfield::VmField<f32>]) -> Vec<Vec<f32>> {
    fields
        .iter()
        .flat_map(|f| f.params().tensors().into_iter().map(<[f32]>::to_vec))
        .collect()
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let bundle = small_bundle(2);
    let cfg = TrainConfig {
        stage1_weights: LossWeights {
            rgb: 0.0,
            depth: 0.0,
            seg: 0.0,
        },
        upsample_at: vec![],
        ..small_cfg()
    };
    let mut fields = init_fields(&bundle, &cfg).unwrap();
    let before = params_of(&fields);
    stage1_bootstrap(&mut fields, &bundle, &cfg).unwrap();
    assert_eq!(params_of(&fields), before);
}

#[test]
fn deterministic_runs_are_identical() {
    let bundle = small_bundle(2);
    let cfg = small_cfg();
    let (ca, mut ra) = train_full(&bundle, &cfg).unwrap();
    let (cb, mut rb) = train_full(&bundle, &cfg).unwrap();
    assert_eq!(ca.to_bytes().unwrap(), cb.to_bytes().unwrap());
    strip_seconds(&mut ra);
    strip_seconds(&mut rb);
    assert_eq!(ra, rb);
}

#[test]
fn report_records_every_phase() {
    let bundle = small_bundle(2);
    let cfg = TrainConfig {
        rounds: 3,
        ..small_cfg()
    };
    let mut seen = Vec::new();
    let (ckpt, report) = train_full_observed(&bundle, &cfg, |r, c| seen.push((r, c.num_objects()))).unwrap();
    assert_eq!(seen, vec![(0, 2), (1, 2), (2, 2)]);
    let s1 = report.stage1.as_ref().unwrap();
    assert_eq!(s1.iterations, cfg.stage1_iters);
    assert!(s1.losses.iter().all(|l| l.len() == cfg.stage1_iters));
    assert_eq!(s1.upsampled.len(), 1);
    assert_eq!(report.stage2.rounds.len(), cfg.rounds);
    for (i, r) in report.stage2.rounds.iter().enumerate() {
        assert_eq!(r.round, i + 1);
        assert_eq!(r.scalenet.loss.len(), cfg.scalenet_iters);
        assert_eq!(r.fields.loss.len(), cfg.field_iters);
        assert!(r.fields.attempts >= cfg.field_iters);
    }
    assert_eq!(report.order[0], 0);
    assert_eq!(ckpt.order, report.order);
    assert_eq!(ckpt.fields[0].shape.resolution, [cfg.resolution; 3]);
}

#[test]
fn single_object_rgb_loss_halves() {
    let bundle = small_bundle(1);
    let cfg = TrainConfig {
        stage1_iters: 200,
        rays_per_batch: 128,
        samples_per_ray: 32,
        resolution: 16,
        upsample_at: vec![50, 100],
        deterministic: false,
        ..small_cfg()
    };
    let mut fields = init_fields(&bundle, &cfg).unwrap();
    let report = stage1_bootstrap(&mut fields, &bundle, &cfg).unwrap();
    let rgb: Vec<f64> = report.losses[0].iter().map(|l| l.rgb).collect();
    let head = rgb[..10].iter().sum::<f64>() / 10.0;
    let tail = rgb[190..].iter().sum::<f64>() / 10.0;
    assert!(tail <= 0.5 * head, "rgb {head:.4} -> {tail:.4}");
}

#[test]
fn unweighted_segmentation_is_reported_but_not_applied() {
    let bundle = small_bundle(2);
    let cfg = TrainConfig {
        scalenet_iters: 0,
        rounds: 1,
        stage2_weights: LossWeights {
            rgb: 1.0,
            depth: 1.0,
            seg: 0.0,
        },
        ..small_cfg()
    };
    let mut fields = init_fields(&bundle, &cfg).unwrap();
    let net = ScaleMlp::constant(2, 0.99);
    let mut frozen = net.clone();
    let report = stage2_alternate(&mut fields, &mut frozen, &bundle, &cfg, |_, _, _| {}).unwrap();
    assert_eq!(frozen, net);
    let losses = &report.rounds[0].fields.loss;
    assert_eq!(losses.len(), cfg.field_iters);
    assert!(losses.iter().all(|l| l.seg.is_finite() && l.seg > 0.0));

    // A positive weight would have moved the fields.
    let weighted = TrainConfig {
        stage2_weights: LossWeights {
            seg: 5.0,
            ..cfg.stage2_weights
        },
        ..cfg.clone()
    };
    let mut other = init_fields(&bundle, &weighted).unwrap();
    stage2_alternate(&mut other, &mut net.clone(), &bundle, &weighted, |_, _, _| {}).unwrap();
    assert_ne!(params_of(&other), params_of(&fields));
}

#[test]
fn threshold_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(phase_threshold(&cfg, 0.99), cfg.validity_threshold);
    assert!((phase_threshold(&cfg, 0.9) - 0.88).abs() < 1e-12);
    assert_eq!(phase_threshold(&cfg, 0.1), cfg.ramp_start);
    assert_eq!(ramp_threshold(&cfg, 0, 0, 0.95), cfg.ramp_start);
    assert_eq!(ramp_threshold(&cfg, 1, 0, 0.95), 0.95);
    let mid = ramp_threshold(&cfg, 0, cfg.field_iters / 2, 0.95);
    assert!((mid - 0.725).abs() < 1e-12);
}

#[test]
fn checkpoint_reload_gives_the_same_validity_grid() {
    let bundle = small_bundle(2);
    let (ckpt, _) = train_full(&bundle, &small_cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let a = objscale_core::scalenet::scan_valid_region(&ckpt.scalenet, 101, &[0], &[0.0]).unwrap();
    let b = objscale_core::scalenet::scan_valid_region(&back.scalenet, 101, &[0], &[0.0]).unwrap();
    assert_eq!(a.scores, b.scores);
    assert_eq!(back.to_bytes().unwrap(), ckpt.to_bytes().unwrap());

    let bytes = ckpt.to_bytes().unwrap();
    let origin = std::path::Path::new("x");
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bad, origin).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], origin).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..30], origin).is_err());
}
