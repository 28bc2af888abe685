use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ndarray::Array2;
use objscale_bench::toy_model;
use objscale_core::compositor::{batch_pseudo_labels, composite_render_rays, pseudo_label};
use objscale_core::trainer::{pixel_ray, PixelRef};
use objscale_core::{Ray, ScaleCombination};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rays(bundle: &objscale_core::SceneBundle, n: usize) -> Vec<Ray> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n)
        .map(|_| {
            let frame = rng.random_range(0..bundle.num_frames());
            let pixel = rng.random_range(0..bundle.num_pixels());
            let owner = bundle.masks[frame][pixel] as usize;
            let px = PixelRef {
                frame: frame as u32,
                pixel: pixel as u32,
            };
            pixel_ray(bundle, owner, px).expect("ray")
        })
        .collect()
}

fn labelling(c: &mut Criterion) {
    let (ckpt, bundle) = toy_model(2);
    let rays = rays(&bundle, 64);
    let cfg = ckpt.render_config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("pseudo_labels");
    group.sample_size(10);
    for h in [1usize, 4, 16, 64] {
        let combos: Vec<ScaleCombination> = (0..h)
            .map(|_| ScaleCombination::from_free(&[rng.random::<f64>()], &ckpt.bounds).expect("combo"))
            .collect();
        group.throughput(Throughput::Elements((h * rays.len()) as u64));
        group.bench_with_input(BenchmarkId::new("composite", h), &combos, |b, combos| {
            b.iter(|| {
                let mut hits = 0.0;
                for c in combos {
                    let (out, _) = composite_render_rays(&ckpt.fields, &bundle.poses, &rays, c, &cfg, None).expect("render");
                    hits += out.iter().zip(&rays).map(|(o, r)| pseudo_label(&o.segmentation, r.owner)).sum::<f64>();
                }
                hits
            })
        });
        group.bench_with_input(BenchmarkId::new("soft_z", h), &combos, |b, combos| {
            b.iter(|| {
                batch_pseudo_labels(&ckpt.fields, &bundle.poses, &ckpt.bounds, &rays, combos, ckpt.samples_per_ray)
                    .expect("labels")
            })
        });
    }
    group.finish();
}

fn rendering(c: &mut Criterion) {
    let (ckpt, bundle) = toy_model(2);
    let scales = ScaleCombination::from_free(&[0.5], &ckpt.bounds).expect("combo");
    let mut group = c.benchmark_group("render_frame");
    group.sample_size(10);
    for side in [16usize, 32] {
        group.throughput(Throughput::Elements((side * side) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, &side| {
            b.iter(|| ckpt.render_frame(&bundle, &scales, 0, None, side, side).expect("view"))
        });
    }
    group.finish();
}

fn validity(c: &mut Criterion) {
    let (ckpt, _) = toy_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let free = Array2::from_shape_simple_fn((4096, 2), || rng.random::<f64>());
    c.bench_function("scalenet_predict_4096", |b| b.iter(|| ckpt.scalenet.predict_batch(free.view())));
}

criterion_group!(benches, labelling, rendering, validity);
criterion_main!(benches);
