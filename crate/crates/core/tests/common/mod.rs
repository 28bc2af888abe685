#![allow(dead_code)]

use objscale_core::geometry::{Pose, Ray, ScaleBounds, ScaleCombination, Vec3};
use objscale_core::objectfield::{Aabb, FieldShape, VmField, DENSITY_SHIFT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_shape(res: usize) -> FieldShape {
    FieldShape {
        resolution: [res; 3],
        density_rank: 4,
        app_rank: 5,
        app_dim: 6,
        hidden: 8,
        hidden_layers: 2,
        dir_freqs: 2,
    }
}

pub fn random_field(shape: FieldShape, std: f64, seed: u64) -> VmField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = VmField::random(shape, Aabb::default(), std, &mut rng).unwrap();
    for l in &mut f.params_mut().color_mlp.layers {
        l.bias.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    }
    f
}

/// Pre-activation value giving density `sigma`.
pub fn raw_for_density(sigma: f64) -> f64 {
    sigma.exp_m1().ln() - DENSITY_SHIFT
}

/// Uniform density and color over the whole box.
pub fn uniform_field(aabb: Aabb, sigma: f64, albedo: [f64; 3]) -> VmField<f64> {
    let mut f = VmField::<f64>::zeros(small_shape(4), aabb).unwrap();
    let rank = f.shape.density_rank;
    let raw = raw_for_density(sigma);
    let p = f.params_mut();
    for v in p.density_planes[0].iter_mut().step_by(rank) {
        *v = raw;
    }
    for v in p.density_lines[0].iter_mut().step_by(rank) {
        *v = 1.0;
    }
    let last = p.color_mlp.layers.last_mut().unwrap();
    for (b, a) in last.bias.iter_mut().zip(albedo) {
        *b = (a / (1.0 - a)).ln();
    }
    f
}

/// Dense matter filling unit heights `z >= node / (res - 1)`.
pub fn halfspace_field(aabb: Aabb, res: usize, node: usize, raw: f64, albedo: [f64; 3]) -> VmField<f64> {
    let mut f = VmField::<f64>::zeros(small_shape(res), aabb).unwrap();
    let rank = f.shape.density_rank;
    let p = f.params_mut();
    for v in p.density_planes[0].iter_mut().step_by(rank) {
        *v = 1.0;
    }
    for n in node..res {
        p.density_lines[0][n * rank] = raw;
    }
    let last = p.color_mlp.layers.last_mut().unwrap();
    for (b, a) in last.bias.iter_mut().zip(albedo) {
        *b = (a / (1.0 - a)).ln();
    }
    f
}

pub fn ray(o: Vec3, d: Vec3, owner: usize) -> Ray {
    Ray {
        origin: o,
        direction: d.normalize(),
        frame: 0,
        owner,
        pixel: (0, 0),
    }
}

/// Poses placing each unit-box object's center at scene distance `dist[j]`
/// in front of the camera under multipliers `sbar`, with random rotations.
pub fn facing_poses(sbar: &[f64], dist: &[f64], rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let center = Vec3::new(0.5, 0.5, 0.5);
    sbar.iter()
        .zip(dist)
        .map(|(&s, &d)| {
            let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let rot = Pose::from_axis_angle(axis, rng.random_range(-1.0..1.0), Vec3::zeros());
            let t = center - rot.rotation * Vec3::new(0.0, 0.0, d / s);
            Pose::new(rot.rotation, t).unwrap()
        })
        .collect()
}

/// Rays from the camera center of `owner`, within a small cone around the optical axis.
pub fn camera_rays(poses: &[Pose], owner: usize, count: usize, cone: f64, rng: &mut ChaCha8Rng) -> Vec<Ray> {
    (0..count)
        .map(|i| {
            let d_cam = Vec3::new(rng.random_range(-cone..cone), rng.random_range(-cone..cone), 1.0).normalize();
            let mut r = ray(poses[owner].translation, poses[owner].rotate(&d_cam), owner);
            r.pixel = (i, 0);
            r
        })
        .collect()
}

pub fn unit_bounds(k: usize) -> ScaleBounds {
    ScaleBounds {
        near_obj: vec![1.0; k],
        far_obj: vec![4.0; k],
        near_scene: 0.5,
        far_scene: 8.0,
    }
}

pub fn combo(denorm: Vec<f64>) -> ScaleCombination {
    ScaleCombination::from_denorm(denorm).unwrap()
}
