//! Two-stage optimization: independent per-object bootstrapping, then
//! alternation between the scale network and composite field training.

mod config;
mod data;

pub use config::TrainConfig;
pub use data::{anchor_order, estimate_aabb, pixel_ray, pixel_target, PixelRef, RayPool};

use std::time::Instant;

use log::info;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::compositor::{
    composite_backward, composite_render_rays, object_losses, pseudo_label, scene_losses, soft_z_depths_batch,
    soft_z_segmentation, CompositeGrad, LossWeights, SceneLosses,
};
use crate::error::{Error, Result};
use crate::geometry::ScaleCombination;
use crate::nn::{Adam, AdamConfig};
use crate::objectfield::{field_backward, render_rays, FieldGrads, FieldShape, RayGrad, RenderConfig, VmField};
use crate::scalenet::{sample_valid_combination, ScaleMlp, ScaleTrainer};
use crate::scenegen::SceneBundle;

/// Gradient batches are split into this many chunks regardless of the
/// thread count, so sums are identical in serial and parallel runs.
const CHUNKS: usize = 4;
/// Plane and line factor tensors lead the field's tensor list.
const GRID_TENSORS: usize = 12;

const STREAM_INIT: u64 = 0x1;
const STREAM_STAGE1: u64 = 0x2;
const STREAM_STAGE2: u64 = 0x3;
const STREAM_SCALENET: u64 = 0x4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Adam over one field, with separate rates for the grid factors and the
/// appearance basis plus color MLP.
#[derive(Clone, Debug)]
pub struct FieldOptimizer {
    grid: Adam<f32>,
    net: Adam<f32>,
}

impl FieldOptimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            grid: Adam::new(AdamConfig {
                eps: cfg.adam_eps,
                ..AdamConfig::with_lr(cfg.grid_lr)
            }),
            net: Adam::new(AdamConfig {
                eps: cfg.adam_eps,
                ..AdamConfig::with_lr(cfg.lr)
            }),
        }
    }

    pub fn reset(&mut self) {
        self.grid.reset();
        self.net.reset();
    }

    pub fn step(&mut self, field: &mut VmField<f32>, grads: &FieldGrads<f32>) {
        let mut params = field.params_mut().tensors_mut();
        let net_params = params.split_off(GRID_TENSORS);
        let mut g = grads.tensors();
        let g_net = g.split_off(GRID_TENSORS);
        self.grid.step(params, g);
        self.net.step(net_params, g_net);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub iterations: usize,
    /// Batch losses per object per iteration, unweighted.
    pub losses: Vec<Vec<SceneLosses>>,
    /// `(iteration, resolution)` of each upsampling step.
    pub upsampled: Vec<(usize, usize)>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalePhaseReport {
    pub iterations: usize,
    pub loss: Vec<f64>,
    /// Rays with at least two objects hit, the pool the labels come from.
    pub contested_rays: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldPhaseReport {
    pub iterations: usize,
    pub loss: Vec<SceneLosses>,
    /// Best validity score found when the phase starts.
    pub max_score: f64,
    /// Threshold the phase samples at (after the first round's ramp).
    pub threshold: f64,
    /// Draws made by the rejection sampler over the phase.
    pub attempts: usize,
    /// Accepted combinations per draw.
    pub acceptance_rate: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub scalenet: ScalePhaseReport,
    pub fields: FieldPhaseReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub rounds: Vec<RoundReport>,
}

impl Stage2Report {
    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.fields.acceptance_rate).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// Scene object index of each trained object; entry 0 is the anchor.
    pub order: Vec<usize>,
    pub stage1: Option<Stage1Report>,
    pub stage2: Stage2Report,
    pub seconds: f64,
}

fn map_ordered<I: Sync, R: Send>(serial: bool, items: &[I], f: impl Fn(&I) -> R + Sync + Send) -> Vec<R> {
    if serial {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    let size = n.div_ceil(CHUNKS).max(1);
    (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect()
}

fn add_losses(acc: &mut SceneLosses, l: &SceneLosses, frac: f64) {
    acc.rgb += l.rgb * frac;
    acc.depth += l.depth * frac;
    acc.seg += l.seg * frac;
}

fn check_objects(fields: usize, bundle: &SceneBundle) -> Result<()> {
    if fields != bundle.num_objects() {
        return Err(Error::Dimension {
            what: "object fields",
            expected: bundle.num_objects(),
            got: fields,
        });
    }
    Ok(())
}

/// Randomly initialized fields boxed around each object's back-projected
/// depth, at the coarse resolution (or the final one when stage 1 is skipped).
pub fn init_fields(bundle: &SceneBundle, cfg: &TrainConfig) -> Result<Vec<VmField<f32>>> {
    cfg.validate()?;
    let pool = RayPool::new(bundle)?;
    let mut rng = stream(cfg.seed, STREAM_INIT);
    let res = if cfg.skip_stage1 {
        cfg.resolution
    } else {
        cfg.coarse_resolution()
    };
    (0..bundle.num_objects())
        .map(|k| {
            let aabb = estimate_aabb(bundle, &pool, k, cfg.aabb_pad)?;
            VmField::<f32>::random(FieldShape::default().with_resolution(res), aabb, cfg.init_std, &mut rng)
        })
        .collect()
}

fn object_step(
    field: &VmField<f32>,
    bundle: &SceneBundle,
    k: usize,
    pixels: &[PixelRef],
    rcfg: &RenderConfig,
    w: &LossWeights,
    seeds: &[u64],
    serial: bool,
) -> Result<(SceneLosses, FieldGrads<f32>)> {
    let n = pixels.len();
    let ranges = chunk_ranges(n);
    let jobs: Vec<_> = ranges.into_iter().zip(seeds.iter().copied()).collect();
    let parts = map_ordered(serial, &jobs, |(range, seed)| -> Result<_> {
        let chunk = &pixels[range.clone()];
        let rays = chunk.iter().map(|&px| pixel_ray(bundle, k, px)).collect::<Result<Vec<_>>>()?;
        let targets: Vec<_> = chunk.iter().map(|&px| pixel_target(bundle, k, px)).collect();
        let mut jitter = ChaCha8Rng::seed_from_u64(*seed);
        let (out, tape) = render_rays(field, &rays, rcfg, Some(&mut jitter))?;
        let (loss, mut g) = object_losses(&out, &targets, w.rgb, w.depth)?;
        let frac = chunk.len() as f64 / n as f64;
        let f = frac as f32;
        for (gi, o) in g.iter_mut().zip(&out) {
            *gi = RayGrad {
                color: gi.color.map(|c| c * f),
                depth: gi.depth * f * o.opacity.clamp(0.0, 1.0),
                opacity: gi.opacity * f,
            };
        }
        Ok((loss, frac, field_backward(field, &tape, &g)?))
    });
    let mut total = SceneLosses::default();
    let mut grads = field.grads_zeros();
    for part in parts {
        let (loss, frac, g) = part?;
        add_losses(&mut total, &loss, frac);
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Stage 1: each object is fit alone on its own masked pixels with RGB and
/// up-to-scale depth losses. Grids are upsampled on the configured schedule.
pub fn stage1_bootstrap(fields: &mut [VmField<f32>], bundle: &SceneBundle, cfg: &TrainConfig) -> Result<Stage1Report> {
    cfg.validate()?;
    check_objects(fields.len(), bundle)?;
    let start = Instant::now();
    let pool = RayPool::new(bundle)?;
    let bounds = bundle.bounds();
    let mut rng = stream(cfg.seed, STREAM_STAGE1);
    let mut opts: Vec<FieldOptimizer> = fields.iter().map(|_| FieldOptimizer::new(cfg)).collect();
    let steps = cfg.resolution_steps();
    let mut report = Stage1Report {
        iterations: cfg.stage1_iters,
        losses: vec![Vec::with_capacity(cfg.stage1_iters); fields.len()],
        ..Default::default()
    };
    for it in 0..cfg.stage1_iters {
        if let Some(i) = cfg.upsample_at.iter().position(|&u| u == it) {
            let res = steps[i];
            for (f, opt) in fields.iter_mut().zip(&mut opts) {
                if f.shape.resolution.iter().any(|&r| r < res) {
                    *f = f.upsample([res; 3].map(|r| r.max(f.shape.resolution[0])))?;
                    opt.reset();
                }
            }
            report.upsampled.push((it, res));
        }
        for k in 0..fields.len() {
            let pixels = pool.sample(k, cfg.rays_per_batch, &mut rng);
            let seeds: Vec<u64> = (0..CHUNKS).map(|_| rng.random()).collect();
            let rcfg = RenderConfig {
                samples_per_ray: cfg.samples_per_ray,
                near: bounds.near_obj[k],
                far: bounds.far_obj[k],
                white_background: false,
                weight_threshold: cfg.weight_threshold,
            };
            let (loss, grads) = object_step(
                &fields[k],
                bundle,
                k,
                &pixels,
                &rcfg,
                &cfg.stage1_weights,
                &seeds,
                cfg.deterministic,
            )?;
            opts[k].step(&mut fields[k], &grads);
            report.losses[k].push(loss);
        }
        if (it + 1) % 100 == 0 {
            let rgb: Vec<String> = report.losses.iter().map(|l| format!("{:.4}", l[it].rgb)).collect();
            info!("stage 1 iteration {}: rgb {}", it + 1, rgb.join(" "));
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Soft Z-buffer depths of every pixel of every frame, keeping rays where
/// at least two objects are hit. Returned per ray owner.
fn contested_depths(fields: &[VmField<f32>], bundle: &SceneBundle, cfg: &TrainConfig) -> Result<Vec<Vec<Vec<f64>>>> {
    let frames: Vec<usize> = (0..bundle.num_frames()).collect();
    let per_frame = map_ordered(cfg.deterministic, &frames, |&n| -> Result<_> {
        let mask = &bundle.masks[n];
        let rays = (0..mask.len())
            .map(|p| {
                pixel_ray(
                    bundle,
                    mask[p] as usize,
                    PixelRef {
                        frame: n as u32,
                        pixel: p as u32,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let depths = soft_z_depths_batch(fields, &bundle.poses, bundle.bounds(), &rays, cfg.samples_per_ray)?;
        Ok(depths
            .into_iter()
            .zip(mask.iter())
            .filter(|(d, _)| d.iter().filter(|v| v.is_finite()).count() >= 2)
            .map(|(d, &owner)| (owner as usize, d))
            .collect::<Vec<_>>())
    });
    let mut groups = vec![Vec::new(); fields.len()];
    for frame in per_frame {
        for (owner, d) in frame? {
            groups[owner].push(d);
        }
    }
    Ok(groups)
}

/// Stage 2 phase (a): the fields are frozen and the scale network is fit by
/// BCE to pseudo labels. Each iteration draws `h` combinations and labels
/// them on rays drawn in equal numbers from every owner; a combination's
/// target is the mean of its labels, per owner first, then across owners.
pub fn scalenet_phase(
    fields: &[VmField<f32>],
    scalenet: &mut ScaleMlp,
    trainer: &mut ScaleTrainer,
    bundle: &SceneBundle,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ScalePhaseReport> {
    let start = Instant::now();
    let groups: Vec<(usize, Vec<Vec<f64>>)> = contested_depths(fields, bundle, cfg)?
        .into_iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .collect();
    let contested = groups.iter().map(|(_, g)| g.len()).sum();
    let free_dims = scalenet.num_free();
    let per_group = if groups.is_empty() {
        0
    } else {
        (cfg.label_rays / groups.len()).max(1)
    };
    let mut loss = Vec::with_capacity(cfg.scalenet_iters);
    for _ in 0..cfg.scalenet_iters {
        let free = Array2::from_shape_simple_fn((cfg.h, free_dims), || rng.random::<f64>());
        let picks: Vec<Vec<usize>> = groups
            .iter()
            .map(|(_, g)| (0..per_group).map(|_| rng.random_range(0..g.len())).collect())
            .collect();
        let combos = free
            .rows()
            .into_iter()
            .map(|row| ScaleCombination::from_free(row.as_slice().expect("row"), bundle.bounds()))
            .collect::<Result<Vec<_>>>()?;
        let labels = map_ordered(cfg.deterministic, &combos, |combo| {
            if groups.is_empty() {
                return 1.0;
            }
            let mut acc = 0.0;
            for ((owner, g), pick) in groups.iter().zip(&picks) {
                let hits: f64 = pick
                    .iter()
                    .map(|&i| pseudo_label(&soft_z_segmentation(&g[i], combo), *owner))
                    .sum();
                acc += hits / pick.len() as f64;
            }
            acc / groups.len() as f64
        });
        loss.push(trainer.train_step_bce(scalenet, &free, &labels)?);
    }
    Ok(ScalePhaseReport {
        iterations: cfg.scalenet_iters,
        loss,
        contested_rays: contested,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn composite_step(
    fields: &[VmField<f32>],
    bundle: &SceneBundle,
    pixels: &[(usize, PixelRef)],
    scales: &ScaleCombination,
    rcfg: &RenderConfig,
    w: &LossWeights,
    seeds: &[u64],
    serial: bool,
) -> Result<(SceneLosses, Vec<FieldGrads<f32>>)> {
    let n = pixels.len();
    let jobs: Vec<_> = chunk_ranges(n).into_iter().zip(seeds.iter().copied()).collect();
    let parts = map_ordered(serial, &jobs, |(range, seed)| -> Result<_> {
        let chunk = &pixels[range.clone()];
        let rays = chunk
            .iter()
            .map(|&(k, px)| pixel_ray(bundle, k, px))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<_> = chunk.iter().map(|&(k, px)| pixel_target(bundle, k, px)).collect();
        let mut jitter = ChaCha8Rng::seed_from_u64(*seed);
        let (out, tape) = composite_render_rays(fields, &bundle.poses, &rays, scales, rcfg, Some(&mut jitter))?;
        let (loss, mut g) = scene_losses(&out, &targets, scales, w)?;
        let frac = chunk.len() as f64 / n as f64;
        let f = frac as f32;
        for (gi, o) in g.iter_mut().zip(&out) {
            *gi = CompositeGrad {
                color: gi.color.map(|c| c * f),
                depth: gi.depth * f * o.opacity.clamp(0.0, 1.0),
                opacity: gi.opacity * f,
                segmentation: gi.segmentation.iter().map(|s| *s * f).collect(),
            };
        }
        Ok((loss, frac, composite_backward(fields, &tape, &g)?))
    });
    let mut total = SceneLosses::default();
    let mut grads: Vec<FieldGrads<f32>> = fields.iter().map(|f| f.grads_zeros()).collect();
    for part in parts {
        let (loss, frac, g) = part?;
        add_losses(&mut total, &loss, frac);
        for (acc, gk) in grads.iter_mut().zip(&g) {
            acc.add_assign(gk);
        }
    }
    Ok((total, grads))
}

/// Free-scale draws used to estimate the scale network's best score.
const PROBE_DRAWS: usize = 4096;

/// Largest validity score over uniform draws of the free scales.
pub fn probe_max_score(net: &ScaleMlp, rng: &mut ChaCha8Rng) -> f64 {
    let free = Array2::from_shape_simple_fn((PROBE_DRAWS, net.num_free()), || rng.random::<f64>());
    net.predict_batch(free.view()).into_iter().fold(0.0, f64::max)
}

/// Threshold a field phase settles at: the configured validity threshold,
/// lowered to `margin` below the network's best score when that is lower,
/// but never below the ramp start.
pub fn phase_threshold(cfg: &TrainConfig, max_score: f64) -> f64 {
    cfg.validity_threshold.min(max_score - cfg.threshold_margin).max(cfg.ramp_start)
}

/// Sampling threshold at `iteration` of a field phase (zero-based). The
/// first round ramps linearly from the ramp start to `target`.
pub fn ramp_threshold(cfg: &TrainConfig, round: usize, iteration: usize, target: f64) -> f64 {
    if round > 0 || cfg.field_iters == 0 {
        return target;
    }
    let t = iteration as f64 / cfg.field_iters as f64;
    (cfg.ramp_start + (target - cfg.ramp_start) * t).max(cfg.ramp_start)
}

/// Stage 2 phase (b): the scale network is frozen and the fields are fit
/// by the composite scene losses, one sampled valid combination per batch.
#[allow(clippy::too_many_arguments)]
pub fn field_phase(
    fields: &mut [VmField<f32>],
    scalenet: &ScaleMlp,
    opts: &mut [FieldOptimizer],
    bundle: &SceneBundle,
    pool: &RayPool,
    cfg: &TrainConfig,
    round: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FieldPhaseReport> {
    let start = Instant::now();
    let bounds = bundle.bounds();
    let k = fields.len();
    let rcfg = RenderConfig {
        samples_per_ray: cfg.composite_samples,
        near: bounds.near_scene,
        far: bounds.far_scene,
        white_background: false,
        weight_threshold: cfg.weight_threshold,
    };
    let mut report = FieldPhaseReport {
        iterations: cfg.field_iters,
        ..Default::default()
    };
    report.max_score = probe_max_score(scalenet, rng);
    report.threshold = phase_threshold(cfg, report.max_score);
    for it in 0..cfg.field_iters {
        let threshold = ramp_threshold(cfg, round, it, report.threshold);
        let sample = sample_valid_combination(scalenet, bounds, threshold, cfg.max_rejection_attempts, rng).map_err(
            |e| Error::TrainingStarvation {
                round: round + 1,
                iteration: it + 1,
                source: Box::new(e),
            },
        )?;
        report.attempts += sample.attempts;
        let mut pixels = Vec::with_capacity(cfg.rays_per_batch);
        for obj in 0..k {
            let quota = cfg.rays_per_batch / k + usize::from(obj < cfg.rays_per_batch % k);
            pixels.extend(pool.sample(obj, quota, rng).into_iter().map(|p| (obj, p)));
        }
        let seeds: Vec<u64> = (0..CHUNKS).map(|_| rng.random()).collect();
        let (loss, grads) = composite_step(
            fields,
            bundle,
            &pixels,
            &sample.scales,
            &rcfg,
            &cfg.stage2_weights,
            &seeds,
            cfg.deterministic,
        )?;
        for ((f, opt), g) in fields.iter_mut().zip(opts.iter_mut()).zip(&grads) {
            opt.step(f, g);
        }
        report.loss.push(loss);
    }
    report.acceptance_rate = if report.attempts > 0 {
        cfg.field_iters as f64 / report.attempts as f64
    } else {
        1.0
    };
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Stage 2: `cfg.rounds` rounds of (a) scale-network training on pseudo
/// labels and (b) field training under sampled valid combinations. The
/// scale network's optimizer restarts every round; the fields' persists.
/// `on_round` sees the state after every round.
pub fn stage2_alternate(
    fields: &mut [VmField<f32>],
    scalenet: &mut ScaleMlp,
    bundle: &SceneBundle,
    cfg: &TrainConfig,
    mut on_round: impl FnMut(usize, &[VmField<f32>], &ScaleMlp),
) -> Result<Stage2Report> {
    cfg.validate()?;
    check_objects(fields.len(), bundle)?;
    if scalenet.num_objects() != fields.len() {
        return Err(Error::Dimension {
            what: "scale network objects",
            expected: fields.len(),
            got: scalenet.num_objects(),
        });
    }
    let pool = RayPool::new(bundle)?;
    let mut rng = stream(cfg.seed, STREAM_STAGE2);
    let mut opts: Vec<FieldOptimizer> = fields.iter().map(|_| FieldOptimizer::new(cfg)).collect();
    let mut trainer = ScaleTrainer::new(AdamConfig::with_lr(cfg.lr));
    let mut report = Stage2Report::default();
    for round in 0..cfg.rounds {
        trainer.adam.reset();
        let scale = scalenet_phase(fields, scalenet, &mut trainer, bundle, cfg, &mut rng)?;
        info!(
            "round {}: scale network loss {:.4} on {} contested rays",
            round + 1,
            scale.loss.last().copied().unwrap_or(f64::NAN),
            scale.contested_rays
        );
        let field = field_phase(fields, scalenet, &mut opts, bundle, &pool, cfg, round, &mut rng)?;
        info!(
            "round {}: field rgb {:.4}, threshold {:.3}, acceptance {:.3}",
            round + 1,
            field.loss.last().map_or(f64::NAN, |l| l.rgb),
            field.threshold,
            field.acceptance_rate
        );
        on_round(round, fields, scalenet);
        report.rounds.push(RoundReport {
            round: round + 1,
            scalenet: scale,
            fields: field,
        });
    }
    Ok(report)
}

/// Both stages on `bundle`, with the largest object as the anchor. The
/// checkpoint's objects follow the anchor order recorded in it.
pub fn train_full(bundle: &SceneBundle, cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    train_full_observed(bundle, cfg, |_, _| {})
}

/// [`train_full`], calling `on_round` with the model after every stage-2 round.
pub fn train_full_observed(
    bundle: &SceneBundle,
    cfg: &TrainConfig,
    mut on_round: impl FnMut(usize, &Checkpoint),
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    bundle.validate()?;
    let start = Instant::now();
    let order = anchor_order(bundle);
    let ordered = bundle.reordered(&order);
    let mut fields = init_fields(&ordered, cfg)?;
    let stage1 = if cfg.skip_stage1 {
        None
    } else {
        Some(stage1_bootstrap(&mut fields, &ordered, cfg)?)
    };
    let mut scalenet = ScaleMlp::new(fields.len(), &mut stream(cfg.seed, STREAM_SCALENET));
    let snapshot = |fields: &[VmField<f32>], scalenet: &ScaleMlp| Checkpoint {
        fields: fields.to_vec(),
        scalenet: scalenet.clone(),
        bounds: ordered.bounds().clone(),
        order: order.clone(),
        samples_per_ray: cfg.composite_samples,
    };
    let stage2 = stage2_alternate(&mut fields, &mut scalenet, &ordered, cfg, |r, f, s| {
        on_round(r, &snapshot(f, s))
    })?;
    let ckpt = snapshot(&fields, &scalenet);
    let report = TrainReport {
        config: cfg.clone(),
        order: order.clone(),
        stage1,
        stage2,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((ckpt, report))
}
