use ndarray::Array2;
use objscale_core::geometry::{Ray, Vec3};
use objscale_core::objectfield::*;
use objscale_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_shape(res: usize) -> FieldShape {
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

fn random_field(shape: FieldShape, std: f64, seed: u64) -> VmField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = VmField::random(shape, Aabb::default(), std, &mut rng).unwrap();
    for l in &mut f.params_mut().color_mlp.layers {
        l.bias.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    }
    f
}

fn ray(o: [f64; 3], d: [f64; 3]) -> Ray {
    Ray {
        origin: Vec3::from(o),
        direction: Vec3::from(d).normalize(),
        frame: 0,
        owner: 0,
        pixel: (0, 0),
    }
}

/// Dense node tensor of a plane/line group, `[nx][ny][nz]` of `3 R` products.
fn dense_group(planes: &[Vec<f64>; 3], lines: &[Vec<f64>; 3], res: [usize; 3], rank: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for x in 0..res[0] {
        for y in 0..res[1] {
            for z in 0..res[2] {
                let idx = [x, y, z];
                let mut v = Vec::with_capacity(3 * rank);
                for j in 0..3 {
                    let (a, b) = PLANE_AXES[j];
                    let c = LINE_AXIS[j];
                    for r in 0..rank {
                        let p = planes[j][(idx[a] * res[b] + idx[b]) * rank + r];
                        let l = lines[j][idx[c] * rank + r];
                        v.push(p * l);
                    }
                }
                out.push(v);
            }
        }
    }
    out
}

fn trilinear(dense: &[Vec<f64>], res: [usize; 3], u: [f64; 3]) -> Vec<f64> {
    let mut i0 = [0usize; 3];
    let mut f = [0.0; 3];
    for i in 0..3 {
        let g = u[i] * (res[i] - 1) as f64;
        i0[i] = (g.floor() as usize).min(res[i] - 2);
        f[i] = g - i0[i] as f64;
    }
    let mut out = vec![0.0; dense[0].len()];
    for dx in 0..2 {
        for dy in 0..2 {
            for dz in 0..2 {
                let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                    * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                    * (if dz == 1 { f[2] } else { 1.0 - f[2] });
                let node = ((i0[0] + dx) * res[1] + i0[1] + dy) * res[2] + i0[2] + dz;
                for (o, v) in out.iter_mut().zip(&dense[node]) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    x.exp().ln_1p()
}

fn oracle_density(field: &VmField<f64>, u: [f64; 3]) -> f64 {
    let p = field.params();
    let dense = dense_group(&p.density_planes, &p.density_lines, field.shape.resolution, field.shape.density_rank);
    let a: f64 = trilinear(&dense, field.shape.resolution, u).iter().sum();
    softplus(a + DENSITY_SHIFT)
}

fn oracle_color(field: &VmField<f64>, u: [f64; 3], d: Vec3) -> [f64; 3] {
    let p = field.params();
    let s = &field.shape;
    let dense = dense_group(&p.app_planes, &p.app_lines, s.resolution, s.app_rank);
    let app = trilinear(&dense, s.resolution, u);
    let mut x = vec![0.0; s.app_dim];
    for (k, xk) in x.iter_mut().enumerate() {
        for (r, a) in app.iter().enumerate() {
            *xk += a * p.basis[[r, k]];
        }
    }
    x.extend(d.iter());
    for l in 0..s.dir_freqs {
        let w = std::f64::consts::PI * 2f64.powi(l as i32);
        x.extend(d.iter().map(|v| (w * v).sin()));
        x.extend(d.iter().map(|v| (w * v).cos()));
    }
    let n = p.color_mlp.layers.len();
    for (i, layer) in p.color_mlp.layers.iter().enumerate() {
        let mut y = layer.bias.to_vec();
        for (o, yo) in y.iter_mut().enumerate() {
            for (k, xk) in x.iter().enumerate() {
                *yo += xk * layer.weight[[k, o]];
            }
            if i + 1 < n {
                *yo = yo.max(0.0);
            }
        }
        x = y;
    }
    [0, 1, 2].map(|c| 1.0 / (1.0 + (-x[c]).exp()))
}

#[test]
fn zero_field_is_nearly_empty() {
    let f = VmField::<f64>::zeros(small_shape(8), Aabb::default()).unwrap();
    let sigma = f.query_density([0.3, 0.4, 0.5]);
    assert!((sigma - softplus(-10.0)).abs() < 1e-15);
    let cfg = RenderConfig {
        samples_per_ray: 64,
        near: 0.0,
        far: 1.0,
        white_background: true,
        weight_threshold: 0.0,
    };
    let out = render_ray_independent(&f, &ray([0.0, 0.5, 0.5], [1.0, 0.0, 0.0]), &cfg).unwrap();
    assert!(out.opacity < 1e-3);
    for c in out.color {
        assert!((c - 1.0).abs() < 1e-3);
    }
}

#[test]
fn outside_points_have_zero_density() {
    let f = random_field(small_shape(8), 1.0, 1);
    for u in [[-0.01, 0.5, 0.5], [0.5, 1.0001, 0.5], [0.2, 0.3, 7.0], [f64::NAN, 0.1, 0.1]] {
        assert_eq!(f.query_density(u), 0.0);
    }
}

#[test]
fn density_matches_dense_oracle() {
    let f = random_field(small_shape(8), 1.0, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let u = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let got = f.query_density(u);
        let want = oracle_density(&f, u);
        assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()), "{got} vs {want}");
    }
}

#[test]
fn single_component_density() {
    let mut f = VmField::<f64>::zeros(small_shape(8), Aabb::default()).unwrap();
    let rank = f.shape.density_rank;
    {
        let p = f.params_mut();
        // plane 0 spans (x, y); node (3, 4), component 1.
        p.density_planes[0][(3 * 8 + 4) * rank + 1] = 5.0;
        p.density_lines[0][6 * rank + 1] = 3.0;
    }
    let u = [3.0 / 7.0, 4.0 / 7.0, 6.0 / 7.0];
    assert!((f.query_density(u) - softplus(15.0 - 10.0)).abs() < 1e-12);
    let half = [3.5 / 7.0, 4.0 / 7.0, 6.0 / 7.0];
    assert!((f.query_density(half) - softplus(7.5 - 10.0)).abs() < 1e-12);
}

#[test]
fn color_matches_dense_oracle() {
    let f = random_field(small_shape(8), 0.5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let u = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.7).normalize();
        let got = f.query_color(u, &d);
        let want = oracle_color(&f, u, d);
        for c in 0..3 {
            assert!((got[c] - want[c]).abs() < 1e-5, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn zero_network_gives_gray() {
    let mut f = random_field(small_shape(8), 0.5, 5);
    f.params_mut().color_mlp.fill_zero();
    assert_eq!(f.query_color([0.2, 0.2, 0.2], &Vec3::z()), [0.5; 3]);
}

#[test]
fn disabled_encoding_is_view_independent() {
    let mut f = random_field(small_shape(8), 0.5, 6);
    f.encode_directions = false;
    let d = Vec3::new(0.3, -0.2, 0.9).normalize();
    assert_eq!(f.query_color([0.6, 0.1, 0.4], &d), f.query_color([0.6, 0.1, 0.4], &-d));
}

fn constant_density_field(sigma_raw: f64) -> VmField<f64> {
    let mut f = VmField::<f64>::zeros(small_shape(4), Aabb::default()).unwrap();
    let rank = f.shape.density_rank;
    let p = f.params_mut();
    for v in p.density_planes[0].iter_mut().step_by(rank) {
        *v = sigma_raw;
    }
    for v in p.density_lines[0].iter_mut().step_by(rank) {
        *v = 1.0;
    }
    f
}

#[test]
fn homogeneous_medium_matches_analytic_transmittance() {
    let f = constant_density_field(12.0);
    let sigma = softplus(2.0);
    let cfg = RenderConfig {
        samples_per_ray: 256,
        near: 0.1,
        far: 0.9,
        white_background: false,
        weight_threshold: 0.0,
    };
    let out = render_ray_independent(&f, &ray([0.0, 0.5, 0.5], [1.0, 0.0, 0.0]), &cfg).unwrap();
    let want = 1.0 - (-sigma * 0.8f64).exp();
    assert!((out.opacity - want).abs() <= 1e-3, "{} vs {want}", out.opacity);
}

#[test]
fn opaque_slab_depth_matches_fine_quadrature() {
    let mut f = VmField::<f64>::zeros(small_shape(33), Aabb::default()).unwrap();
    let rank = f.shape.density_rank;
    {
        let p = f.params_mut();
        for v in p.density_planes[0].iter_mut().step_by(rank) {
            *v = 1.0;
        }
        // line 0 runs along z; a spike at node 20 puts a thin slab at z = 0.625.
        p.density_lines[0][20 * rank] = 200.0;
    }
    let r = ray([0.5, 0.5, 0.0], [0.0, 0.0, 1.0]);
    let coarse = RenderConfig {
        samples_per_ray: 64,
        near: 0.05,
        far: 0.95,
        white_background: false,
        weight_threshold: 0.0,
    };
    let fine = RenderConfig {
        samples_per_ray: 20_000,
        ..coarse.clone()
    };
    let a = render_ray_independent(&f, &r, &coarse).unwrap();
    let b = render_ray_independent(&f, &r, &fine).unwrap();
    assert!(b.opacity > 0.99);
    let spacing = 0.9 / 64.0;
    assert!((a.depth - b.depth).abs() <= spacing, "{} vs {}", a.depth, b.depth);
    assert!((b.depth - 0.625).abs() <= 1.0 / 32.0);
}

#[test]
fn weights_are_bounded_and_sum_to_opacity() {
    let f = random_field(small_shape(8), 1.5, 7);
    let cfg = RenderConfig {
        samples_per_ray: 48,
        near: 0.0,
        far: 1.8,
        white_background: false,
        weight_threshold: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let r = ray(
            [rng.random_range(0.0..0.3), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            [1.0, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)],
        );
        let o = render_ray_independent(&f, &r, &cfg).unwrap();
        assert!((0.0..=1.0).contains(&o.opacity));
        let sigma: Vec<f64> = (0..48)
            .map(|i| {
                let t = (i as f64 + 0.5) * cfg.far / 48.0;
                f.query_density(f.aabb.to_unit(&(r.origin + r.direction * t)))
            })
            .collect();
        let (w, _) = compute_weights(&sigma, cfg.far / 48.0);
        assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!((w.iter().sum::<f64>() - o.opacity).abs() < 1e-12);
    }
}

#[test]
fn rendering_is_deterministic_for_a_seed() {
    let f = random_field(small_shape(8), 1.5, 8);
    let rays: Vec<Ray> = (0..10).map(|i| ray([0.0, 0.1 * i as f64, 0.5], [1.0, 0.0, 0.1])).collect();
    let cfg = RenderConfig {
        near: 0.0,
        far: 1.5,
        ..RenderConfig::default()
    };
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        render_rays(&f, &rays, &cfg, Some(&mut rng)).unwrap().0
    };
    assert_eq!(run(), run());
}

fn grad_setup() -> (VmField<f64>, Vec<Ray>, RenderConfig, Vec<RayGrad<f64>>) {
    let f = random_field(small_shape(8), 1.5, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let rays: Vec<Ray> = (0..16)
        .map(|_| {
            ray(
                [-0.2, rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
                [1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
            )
        })
        .collect();
    let cfg = RenderConfig {
        samples_per_ray: 24,
        near: 0.1,
        far: 1.4,
        white_background: true,
        weight_threshold: 0.0,
    };
    let gs = (0..16)
        .map(|_| RayGrad {
            color: [0, 1, 2].map(|_| rng.random_range(-1.0..1.0)),
            depth: rng.random_range(-1.0..1.0),
            opacity: rng.random_range(-1.0..1.0),
        })
        .collect();
    (f, rays, cfg, gs)
}

fn weighted_loss(f: &VmField<f64>, rays: &[Ray], cfg: &RenderConfig, gs: &[RayGrad<f64>]) -> f64 {
    let (outs, _) = render_rays(f, rays, cfg, None).unwrap();
    outs.iter()
        .zip(gs)
        .map(|(o, g)| {
            (0..3).map(|c| o.color[c] * g.color[c]).sum::<f64>() + o.depth * g.depth + o.opacity * g.opacity
        })
        .sum()
}

#[test]
fn gradients_match_finite_differences() {
    let (mut f, rays, cfg, gs) = grad_setup();
    let (_, tape) = render_rays(&f, &rays, &cfg, None).unwrap();
    let grads = field_backward(&f, &tape, &gs).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let names = grads.tensor_names();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let mut checked = 0;
    for (ti, g) in analytic.iter().enumerate() {
        // Prefer entries with signal; every tensor gets at least a few probes.
        let mut idx: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() > 1e-3).collect();
        if idx.is_empty() {
            idx = (0..g.len()).collect();
        }
        for _ in 0..6 {
            let i = idx[rng.random_range(0..idx.len())];
            let orig = f.params().tensors()[ti][i];
            f.params_mut().tensors_mut()[ti][i] = orig + h;
            let lp = weighted_loss(&f, &rays, &cfg, &gs);
            f.params_mut().tensors_mut()[ti][i] = orig - h;
            let lm = weighted_loss(&f, &rays, &cfg, &gs);
            f.params_mut().tensors_mut()[ti][i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = g[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "{}[{i}]: fd {fd} vs analytic {an}", names[ti]);
            checked += 1;
        }
    }
    assert!(checked >= 6 * 13);
}

#[test]
fn zero_loss_gradient_gives_zero_parameter_gradient() {
    let (f, rays, cfg, _) = grad_setup();
    let (_, tape) = render_rays(&f, &rays, &cfg, None).unwrap();
    let grads = field_backward(&f, &tape, &vec![RayGrad::default(); rays.len()]).unwrap();
    assert_eq!(grads.max_abs(), 0.0);
}

#[test]
fn gradients_are_additive_over_rays() {
    let (f, rays, cfg, gs) = grad_setup();
    let (_, both) = render_rays(&f, &rays[..2], &cfg, None).unwrap();
    let g_both = field_backward(&f, &both, &gs[..2]).unwrap();
    let mut sum = f.grads_zeros();
    for i in 0..2 {
        let (_, t) = render_rays(&f, &rays[i..i + 1], &cfg, None).unwrap();
        sum.add_assign(&field_backward(&f, &t, &gs[i..i + 1]).unwrap());
    }
    for (a, b) in g_both.tensors().iter().zip(sum.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn stale_tape_is_rejected() {
    let (mut f, rays, cfg, gs) = grad_setup();
    let (_, tape) = render_rays(&f, &rays, &cfg, None).unwrap();
    f.params_mut().basis[[0, 0]] += 1.0;
    assert!(matches!(field_backward(&f, &tape, &gs), Err(Error::StaleTape)));
}

#[test]
fn upsample_same_resolution_is_identity() {
    let f = random_field(small_shape(8), 1.0, 30);
    let g = f.upsample([8; 3]).unwrap();
    assert_eq!(f.params(), g.params());
}

#[test]
fn upsample_rejects_shrinking() {
    let f = random_field(small_shape(8), 1.0, 31);
    assert!(matches!(f.upsample([8, 7, 8]), Err(Error::Shrink { .. })));
}

#[test]
fn upsample_keeps_constant_grids_constant() {
    let mut f = VmField::<f64>::zeros(small_shape(5), Aabb::default()).unwrap();
    for t in f.params_mut().tensors_mut().into_iter().take(12) {
        t.fill(0.75);
    }
    let g = f.upsample([9, 13, 7]).unwrap();
    for t in g.params().tensors().into_iter().take(12) {
        assert!(t.iter().all(|&v| (v - 0.75).abs() < 1e-14));
    }
}

#[test]
fn upsample_preserves_density_within_grid_bound() {
    let res = 8;
    let new = 19;
    let f = random_field(small_shape(res), 1.0, 32);
    let g = f.upsample([new; 3]).unwrap();
    // Largest pre-activation slope per axis between neighbouring old nodes.
    let p = f.params();
    let dense: Vec<f64> = dense_group(&p.density_planes, &p.density_lines, [res; 3], f.shape.density_rank)
        .iter()
        .map(|v| v.iter().sum())
        .collect();
    let at = |x: usize, y: usize, z: usize| dense[(x * res + y) * res + z];
    let mut slope = [0.0f64; 3];
    for x in 0..res {
        for y in 0..res {
            for z in 0..res {
                let h = (res - 1) as f64;
                if x + 1 < res {
                    slope[0] = slope[0].max((at(x + 1, y, z) - at(x, y, z)).abs() * h);
                }
                if y + 1 < res {
                    slope[1] = slope[1].max((at(x, y + 1, z) - at(x, y, z)).abs() * h);
                }
                if z + 1 < res {
                    slope[2] = slope[2].max((at(x, y, z + 1) - at(x, y, z)).abs() * h);
                }
            }
        }
    }
    let bound: f64 = slope.iter().map(|s| s / (new - 1) as f64).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let u = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        worst = worst.max((f.query_density(u) - g.query_density(u)).abs());
    }
    assert!(worst <= 5.0 * bound, "{worst} > 5 x {bound}");
}

#[test]
fn color_batch_rows_match_single_queries() {
    let f = random_field(small_shape(8), 0.5, 40);
    let qs: Vec<([f64; 3], Vec3)> = (0..7)
        .map(|i| ([0.1 * i as f64, 0.5, 0.3], Vec3::new(0.0, 0.6, 0.8)))
        .collect();
    let batch: Array2<f64> = f.color_batch(&qs);
    for (i, (u, d)) in qs.iter().enumerate() {
        let one = f.query_color(*u, d);
        for c in 0..3 {
            assert!((batch[[i, c]] - one[c]).abs() < 1e-12);
        }
    }
}
