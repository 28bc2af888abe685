use objscale_core::geometry::Vec3;
use objscale_core::scenegen::sdf::Shape;
use objscale_core::scenegen::*;

fn params(seed: u64, objects: usize) -> SceneParams {
    SceneParams {
        seed,
        objects,
        ..SceneParams::default()
    }
}

#[test]
fn fixed_seed_regenerates_identical_bytes() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let (bundle, gt) = synthesize(&params(11, 2)).unwrap();
        save_bundle(&bundle, dir.path()).unwrap();
        save_gt(&gt, dir.path()).unwrap();
    }
    let files = |d: &std::path::Path| {
        let mut v: Vec<_> = walk(d);
        v.sort();
        v
    };
    let (a, b) = (files(dir_a.path()), files(dir_b.path()));
    assert_eq!(a.len(), b.len());
    for (fa, fb) in a.iter().zip(&b) {
        assert_eq!(fa.strip_prefix(dir_a.path()).unwrap(), fb.strip_prefix(dir_b.path()).unwrap());
        assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap(), "{}", fa.display());
    }
}

fn walk(d: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(d).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn bundle_round_trips_through_disk() {
    let (bundle, gt) = synthesize(&params(3, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&bundle, dir.path()).unwrap();
    save_gt(&gt, dir.path()).unwrap();
    let back = load_bundle(dir.path()).unwrap();
    assert_eq!(back.manifest, bundle.manifest);
    assert_eq!(back.frames, bundle.frames);
    assert_eq!(back.masks, bundle.masks);
    assert_eq!(back.depths, bundle.depths);
    // Poses are stored in single precision.
    for (a, b) in back.poses.iter().flatten().zip(bundle.poses.iter().flatten()) {
        assert!((a.rotation - b.rotation).abs().max() < 1e-6);
        assert!((a.translation - b.translation).abs().max() < 1e-5 * b.translation.norm().max(1.0));
    }
    let gt_back = load_gt(dir.path(), &back.manifest).unwrap();
    assert_eq!(gt_back.isolated, gt.isolated);
    for (a, b) in gt_back.lambda.iter().zip(&gt.lambda) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(gt_back.world.num_objects(), gt.world.num_objects());
    assert_eq!(gt_back.world.num_frames(), gt.world.num_frames());
}

#[test]
fn single_object_scene_is_the_room_alone() {
    let (world, traces) = generate_scene(&params(5, 1)).unwrap();
    assert_eq!(world.num_objects(), 1);
    for tr in &traces {
        assert!(tr.mask.iter().all(|&m| m == 0));
        assert!(tr.depth.iter().all(|d| d.is_finite() && *d > 0.0));
    }
    let (bundle, gt) = emit_bundle(&world, &traces, &[1.0]).unwrap();
    let grid = oracle_valid_region(&bundle, &gt, 11, THETA_AGREE).unwrap();
    assert_eq!(grid.num_free, 0);
    assert!(grid.valid.iter().all(|&v| v));
}

#[test]
fn every_pixel_has_exactly_one_visible_object() {
    let (world, traces) = generate_scene(&params(2, 3)).unwrap();
    for tr in &traces {
        for p in 0..tr.mask.len() {
            let id = tr.mask[p];
            assert!(id < world.num_objects());
            assert_eq!(tr.depth[p], tr.isolated[id][p]);
            let nearest = tr.isolated.iter().map(|iso| iso[p]).fold(f64::INFINITY, f64::min);
            assert_eq!(tr.depth[p], nearest);
        }
    }
}

#[test]
fn identity_gauge_emits_metric_depths() {
    let (world, traces) = generate_scene(&params(4, 2)).unwrap();
    let (bundle, _) = emit_bundle(&world, &traces, &[1.0, 1.0]).unwrap();
    for (n, tr) in traces.iter().enumerate() {
        for p in 0..tr.mask.len() {
            let k = tr.mask[p];
            assert_eq!(bundle.depths[k][n][p], tr.depth[p] as f32);
        }
    }
}

#[test]
fn gauge_two_halves_the_object_depths() {
    let (world, traces) = generate_scene(&params(4, 2)).unwrap();
    let (one, _) = emit_bundle(&world, &traces, &[1.0, 1.0]).unwrap();
    let (two, _) = emit_bundle(&world, &traces, &[1.0, 2.0]).unwrap();
    assert_eq!(one.depths[0], two.depths[0]);
    for (a, b) in one.depths[1].iter().flatten().zip(two.depths[1].iter().flatten()) {
        assert_eq!(*b, ((*a as f64) / 2.0) as f32);
    }
    for (pa, pb) in one.poses[1].iter().zip(&two.poses[1]) {
        assert!((pa.translation / 2.0 - pb.translation).norm() < 1e-12);
    }
}

#[test]
fn emitted_depth_times_gauge_is_metric_depth() {
    let (world, traces) = generate_scene(&params(8, 3)).unwrap();
    let lambda = sample_gauge(8, 3);
    let (bundle, _) = emit_bundle(&world, &traces, &lambda).unwrap();
    for (n, tr) in traces.iter().enumerate() {
        for p in 0..tr.mask.len() {
            let k = tr.mask[p];
            assert_eq!(bundle.depths[k][n][p], (tr.depth[p] / lambda[k]) as f32);
        }
    }
    bundle.validate().unwrap();
    bundle.bounds().validate().unwrap();
}

#[test]
fn three_object_scenes_contain_occlusions() {
    let (_, traces) = generate_scene(&params(7, 3)).unwrap();
    assert!(!occlusion_frames(&traces).is_empty());
}

#[test]
fn truth_is_valid_and_oversized_movers_are_not() {
    let (bundle, gt) = synthesize(&SceneParams::default()).unwrap();
    let grid = oracle_valid_region(&bundle, &gt, 101, THETA_AGREE).unwrap();
    let pixels = relevant_pixels(&bundle, &gt);
    assert!(!pixels.is_empty());
    let truth = true_free_scales(bundle.bounds(), &gt.lambda);
    assert!(oracle_valid_at(&bundle, &pixels, &truth, THETA_AGREE).unwrap().0);
    assert_eq!(grid.truth, truth);
    // A mover pushed out to the largest multiplier ends up behind the room walls.
    assert!(!oracle_valid_at(&bundle, &pixels, &[0.999], THETA_AGREE).unwrap().0);
    assert!(grid.valid_fraction() > 0.0 && grid.valid_fraction() < 1.0);
}

#[test]
fn true_multipliers_reproduce_visibility_at_every_contested_pixel() {
    let (bundle, gt) = synthesize(&params(9, 3)).unwrap();
    let m = true_multipliers(bundle.bounds(), &gt.lambda);
    let pixels = relevant_pixels(&bundle, &gt);
    assert_eq!(agreement(&pixels, &m), 1.0);
}

#[test]
fn sphere_hit_through_center_has_analytic_depth() {
    let shape = Shape::Sphere {
        center: Vec3::new(0.0, 0.0, 5.0),
        radius: 1.5,
    };
    let t = sdf::sphere_trace(&shape, &Vec3::zeros(), &Vec3::new(0.0, 0.0, 1.0), 50.0).unwrap();
    assert!((t - 3.5).abs() < 1e-4);
}

#[test]
fn reordering_permutes_objects_consistently() {
    let (bundle, gt) = synthesize(&params(12, 3)).unwrap();
    let order = [2, 0, 1];
    let (b, g) = (bundle.reordered(&order), gt.reordered(&order));
    b.validate().unwrap();
    assert_eq!(g.lambda, vec![gt.lambda[2], gt.lambda[0], gt.lambda[1]]);
    for n in 0..b.num_frames() {
        for p in 0..b.num_pixels() {
            assert_eq!(order[b.masks[n][p] as usize], bundle.masks[n][p] as usize);
        }
    }
    assert_eq!(g.isolated[0], gt.isolated[2]);
}
