use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::compositor::{batch_pseudo_labels, composite_render_rays, pseudo_label};
use crate::error::{Error, Result};
use crate::geometry::{Ray, ScaleCombination};
use crate::objectfield::{RenderConfig, VmField};
use crate::scenegen::SceneBundle;
use crate::trainer::{pixel_ray, PixelRef};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub rays: usize,
    pub hs: Vec<usize>,
    pub repeats: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            rays: 256,
            hs: vec![1, 4, 16, 64],
            repeats: 5,
            threads: 1,
            seed: 0,
        }
    }
}

/// One row of the timing table; times are medians over the repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub h: usize,
    pub composite_seconds: f64,
    pub soft_z_seconds: f64,
    pub composite_queries: u64,
    pub soft_z_queries: u64,
    pub query_ratio: f64,
    pub speedup: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn queries(fields: &[VmField<f32>]) -> u64 {
    fields.iter().map(VmField::query_count).sum()
}

fn reset(fields: &[VmField<f32>]) {
    fields.iter().for_each(VmField::reset_query_count);
}

/// Masked training pixels drawn uniformly over frames, each cast from its
/// visible object.
fn bench_rays(bundle: &SceneBundle, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Ray>> {
    let px = bundle.num_pixels();
    (0..count)
        .map(|_| {
            let frame = rng.random_range(0..bundle.num_frames());
            let pixel = rng.random_range(0..px);
            let owner = bundle.masks[frame][pixel] as usize;
            pixel_ray(
                bundle,
                owner,
                PixelRef {
                    frame: frame as u32,
                    pixel: pixel as u32,
                },
            )
        })
        .collect()
}

/// Labels `rays` under `h` scale combinations two ways: `h` composite
/// renders per ray, and one soft Z-buffer depth pass shared by all `h`.
/// Both paths take `ckpt.samples_per_ray` samples per object per ray.
pub fn bench_soft_z(ckpt: &Checkpoint, bundle: &SceneBundle, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.rays == 0 || cfg.repeats == 0 || cfg.hs.contains(&0) {
        return Err(Error::InvalidInput("bench: rays, repeats and every H must be positive".into()));
    }
    if bundle.num_objects() != ckpt.num_objects() {
        return Err(Error::Dimension {
            what: "benchmark objects",
            expected: ckpt.num_objects(),
            got: bundle.num_objects(),
        });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rays = bench_rays(bundle, cfg.rays, &mut rng)?;
    let bounds = &ckpt.bounds;
    let m = ckpt.samples_per_ray;
    let rcfg = RenderConfig {
        samples_per_ray: m,
        near: bounds.near_scene,
        far: bounds.far_scene,
        white_background: false,
        weight_threshold: 1e-4,
    };
    let fields = &ckpt.fields;
    let tracks = &bundle.poses;
    pool.install(|| {
        // Warm-up.
        let warm = ScaleCombination::from_free(&vec![0.5; fields.len() - 1], bounds)?;
        composite_render_rays(fields, tracks, &rays, &warm, &rcfg, None)?;
        batch_pseudo_labels(fields, tracks, bounds, &rays, std::slice::from_ref(&warm), m)?;
        cfg.hs
            .iter()
            .map(|&h| {
                let combos = (0..h)
                    .map(|_| {
                        let free: Vec<f64> = (1..fields.len()).map(|_| rng.random::<f64>()).collect();
                        ScaleCombination::from_free(&free, bounds)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (mut tc, mut ts) = (Vec::new(), Vec::new());
                let (mut qc, mut qs) = (0, 0);
                for _ in 0..cfg.repeats {
                    reset(fields);
                    let t = Instant::now();
                    let mut hits = 0.0;
                    for c in &combos {
                        let (out, _) = composite_render_rays(fields, tracks, &rays, c, &rcfg, None)?;
                        hits += out
                            .iter()
                            .zip(&rays)
                            .map(|(o, r)| pseudo_label(&o.segmentation, r.owner))
                            .sum::<f64>();
                    }
                    std::hint::black_box(hits);
                    tc.push(t.elapsed().as_secs_f64());
                    qc = queries(fields);

                    reset(fields);
                    let t = Instant::now();
                    std::hint::black_box(batch_pseudo_labels(fields, tracks, bounds, &rays, &combos, m)?);
                    ts.push(t.elapsed().as_secs_f64());
                    qs = queries(fields);
                }
                let (c, s) = (median(tc), median(ts));
                Ok(BenchRow {
                    h,
                    composite_seconds: c,
                    soft_z_seconds: s,
                    composite_queries: qc,
                    soft_z_queries: qs,
                    query_ratio: qc as f64 / qs.max(1) as f64,
                    speedup: c / s.max(1e-12),
                })
            })
            .collect()
    })
}
