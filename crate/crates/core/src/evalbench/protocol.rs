use std::collections::HashSet;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{psnr_masked, roc_auc, scale_mse, seg_metrics, ssim_masked, ssimae, ImageBuf};
use crate::checkpoint::Checkpoint;
use crate::compositor::{offset_view, render_view, RenderedView};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, ScaleCombination, Vec3};
use crate::objectfield::RenderConfig;
use crate::scalenet::{sample_many, scan_valid_region, SamplerConfig, ScaleMlp};
use crate::scenegen::{raytrace_frame, raytrace_view, true_multipliers, GtSidecar, OracleGrid, Placement, SceneBundle};

/// A novel view: the camera of training frame `frame` moved by `delta`, a
/// camera-to-camera pose in the anchor object's units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub frame: usize,
    pub delta: Pose,
}

impl ViewSpec {
    /// Sideways step with a compensating turn back towards the scene.
    pub fn side_step(frame: usize, offset: f64) -> Self {
        let yaw = -0.12 * offset.signum() * offset.abs().min(1.0);
        Self {
            frame,
            delta: Pose::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), yaw, Vec3::new(offset, 0.0, 0.0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Valid scale samples drawn per evaluation.
    pub n: usize,
    /// Ground-truth configurations taken from the oracle's valid region.
    pub gt_configs: usize,
    pub views: Vec<ViewSpec>,
    /// Free scales of the single-solution baseline, repeated per object.
    pub fixed_free: f64,
    pub validity_threshold: f64,
    pub max_rejection_attempts: usize,
    /// Body-space edge of the voxels that record observed surface.
    pub voxel: f64,
    pub oracle_resolution: usize,
    pub theta: f64,
    pub weight_threshold: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: 200,
            gt_configs: 5,
            views: vec![
                ViewSpec::side_step(4, 0.8),
                ViewSpec::side_step(7, -0.8),
                ViewSpec::side_step(10, 0.8),
            ],
            fixed_free: 0.5,
            validity_threshold: 0.95,
            max_rejection_attempts: 1_000_000,
            voxel: 0.2,
            oracle_resolution: 101,
            theta: crate::scenegen::THETA_AGREE,
            weight_threshold: 1e-4,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("eval config: {m}")));
        if self.n == 0 || self.gt_configs == 0 || self.views.is_empty() {
            return bad("n, gt_configs and views must be non-empty");
        }
        if !(0.0..1.0).contains(&self.fixed_free) {
            return bad("fixed_free must lie in [0, 1)");
        }
        if !(self.voxel > 0.0) || self.oracle_resolution < 2 {
            return bad("voxel must be positive and oracle_resolution at least 2");
        }
        Ok(())
    }

    fn render_config(&self, ckpt: &Checkpoint) -> RenderConfig {
        RenderConfig {
            samples_per_ray: ckpt.samples_per_ray,
            near: ckpt.bounds.near_scene,
            far: ckpt.bounds.far_scene,
            white_background: false,
            weight_threshold: self.weight_threshold,
        }
    }
}

/// One ground-truth gauge: free scales and the anchor-relative multipliers
/// that realize it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtConfig {
    pub free: Vec<f64>,
    pub relative: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GtView {
    pub rgb: ImageBuf,
    pub depth: Vec<f64>,
    pub labels: Vec<usize>,
    /// Pixels showing surface that some training frame observed.
    pub valid: Vec<bool>,
}

/// Ground-truth renders of every configuration from every view, plus the
/// model-side cameras.
#[derive(Clone, Debug)]
pub struct GtSet {
    pub configs: Vec<GtConfig>,
    /// `[config][view]`.
    pub views: Vec<Vec<GtView>>,
    pub specs: Vec<ViewSpec>,
    pub intrinsics: Intrinsics,
    pub num_objects: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub ssimae: f64,
    pub miou: f64,
    pub pq: f64,
    pub scale_mse: f64,
}

impl EvalMetrics {
    fn mean(items: &[EvalMetrics]) -> Self {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&EvalMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            psnr: sum(|m| m.psnr),
            ssim: sum(|m| m.ssim),
            ssimae: sum(|m| m.ssimae),
            miou: sum(|m| m.miou),
            pq: sum(|m| m.pq),
            scale_mse: sum(|m| m.scale_mse),
        }
    }

    /// Per-metric best: highest PSNR, SSIM, mIoU and PQ, lowest errors.
    fn better(self, o: EvalMetrics) -> Self {
        Self {
            psnr: self.psnr.max(o.psnr),
            ssim: self.ssim.max(o.ssim),
            ssimae: self.ssimae.min(o.ssimae),
            miou: self.miou.max(o.miou),
            pq: self.pq.max(o.pq),
            scale_mse: self.scale_mse.min(o.scale_mse),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: EvalMetrics,
    pub std: EvalMetrics,
}

impl MetricSummary {
    fn of(items: &[EvalMetrics]) -> Self {
        let mean = EvalMetrics::mean(items);
        let n = items.len().max(1) as f64;
        let sd = |f: fn(&EvalMetrics) -> f64| {
            let mu = f(&mean);
            (items.iter().map(|m| (f(m) - mu).powi(2)).sum::<f64>() / n).sqrt()
        };
        Self {
            mean,
            std: EvalMetrics {
                psnr: sd(|m| m.psnr),
                ssim: sd(|m| m.ssim),
                ssimae: sd(|m| m.ssimae),
                miou: sd(|m| m.miou),
                pq: sd(|m| m.pq),
                scale_mse: sd(|m| m.scale_mse),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub config: GtConfig,
    pub best: EvalMetrics,
    pub fixed: EvalMetrics,
    /// Per-view metrics of the sample with the best PSNR on this configuration.
    pub best_views: Vec<EvalMetrics>,
    pub fixed_views: Vec<EvalMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub resolution: usize,
    pub threshold: f64,
    pub iou: f64,
    /// `None` when the oracle grid holds a single class.
    pub auc: Option<f64>,
    pub predicted_valid: usize,
    pub oracle_valid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub fixed_free: Vec<f64>,
    pub configs: Vec<ConfigResult>,
    pub best: MetricSummary,
    pub fixed: MetricSummary,
    /// Mean best PSNR over configurations using the first `n` samples.
    pub best_of_n_curve: Vec<(usize, f64)>,
    pub oracle: Option<OracleComparison>,
    pub notes: Vec<String>,
}

fn voxel_key(object: usize, body: &Vec3, size: f64) -> (usize, i64, i64, i64) {
    let c = body.map(|v| (v / size).floor() as i64);
    (object, c.x, c.y, c.z)
}

/// Voxels of body space, per object, that some training frame shows.
pub fn seen_voxels(gt: &GtSidecar, voxel: f64) -> HashSet<(usize, i64, i64, i64)> {
    let mut seen = HashSet::new();
    for n in 0..gt.world.num_frames() {
        let t = raytrace_frame(&gt.world, n);
        for (p, &id) in t.mask.iter().enumerate() {
            if t.depth[p].is_finite() {
                seen.insert(voxel_key(id, &t.body_hit[p], voxel));
            }
        }
    }
    seen
}

fn observed(seen: &HashSet<(usize, i64, i64, i64)>, key: (usize, i64, i64, i64)) -> bool {
    let (k, x, y, z) = key;
    (-1..=1).any(|dx| (-1..=1).any(|dy| (-1..=1).any(|dz| seen.contains(&(k, x + dx, y + dy, z + dz)))))
}

/// Picks `count` oracle-valid grid points at evenly spaced quantiles of the
/// valid set and traces every view of each. `bundle` and `gt` must follow
/// the checkpoint's object order, and so must `oracle`.
pub fn build_gt_set(bundle: &SceneBundle, gt: &GtSidecar, oracle: &OracleGrid, cfg: &EvalConfig) -> Result<GtSet> {
    cfg.validate()?;
    let k = bundle.num_objects();
    if oracle.num_free + 1 != k || gt.lambda.len() != k {
        return Err(Error::Dimension {
            what: "oracle free axes",
            expected: k.saturating_sub(1),
            got: oracle.num_free,
        });
    }
    for v in &cfg.views {
        if v.frame >= bundle.num_frames() {
            return Err(Error::MissingFrame {
                frame: v.frame,
                frames: bundle.num_frames(),
            });
        }
    }
    let valid: Vec<usize> = (0..oracle.len()).filter(|&i| oracle.valid[i]).collect();
    if valid.is_empty() {
        return Err(Error::InvalidInput("the oracle's valid region is empty".into()));
    }
    let bounds = bundle.bounds();
    let truth = true_multipliers(bounds, &gt.lambda);
    let configs = (0..cfg.gt_configs)
        .map(|i| {
            let q = ((i as f64 + 0.5) / cfg.gt_configs as f64 * valid.len() as f64) as usize;
            let free: Vec<f64> = oracle
                .point(valid[q.min(valid.len() - 1)])
                .into_iter()
                .map(|s| s.min(1.0 - 1e-9))
                .collect();
            let c = ScaleCombination::from_free(&free, bounds)?;
            let relative = c.denorm.iter().map(|m| m / c.denorm[0]).collect();
            Ok(GtConfig { free, relative })
        })
        .collect::<Result<Vec<_>>>()?;
    let seen = seen_voxels(gt, cfg.voxel);
    let anchor_unit = gt.lambda[0];
    let world = &gt.world;
    let views = configs
        .iter()
        .map(|c| {
            let denorm: Vec<f64> = ScaleCombination::from_free(&c.free, bounds)?.denorm;
            cfg.views
                .iter()
                .map(|v| {
                    let n = v.frame;
                    let center = world.cameras[n].translation;
                    let placements: Vec<Placement> = world
                        .objects
                        .iter()
                        .enumerate()
                        .map(|(j, o)| Placement {
                            pose: o.trajectory[n].clone(),
                            center,
                            factor: denorm[j] / truth[j] * truth[0] / denorm[0],
                        })
                        .collect();
                    let delta = Pose {
                        rotation: v.delta.rotation,
                        translation: v.delta.translation * anchor_unit,
                    };
                    let camera = world.cameras[n].compose(&delta);
                    let t = raytrace_view(world, &placements, &camera, &world.intrinsics);
                    let valid = (0..t.mask.len())
                        .map(|p| t.depth[p].is_finite() && observed(&seen, voxel_key(t.mask[p], &t.body_hit[p], cfg.voxel)))
                        .collect();
                    Ok(GtView {
                        rgb: ImageBuf::from_rgb(t.width, t.height, &t.rgb)?,
                        depth: t.depth,
                        labels: t.mask,
                        valid,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GtSet {
        configs,
        views,
        specs: cfg.views.clone(),
        intrinsics: *bundle.intrinsics(),
        num_objects: k,
    })
}

fn render_views(
    ckpt: &Checkpoint,
    bundle: &SceneBundle,
    set: &GtSet,
    scales: &ScaleCombination,
    rcfg: &RenderConfig,
) -> Result<Vec<RenderedView>> {
    set.specs
        .iter()
        .map(|v| {
            let poses = (0..ckpt.num_objects())
                .map(|j| bundle.pose(j, v.frame).cloned())
                .collect::<Result<Vec<_>>>()?;
            let camera = offset_view(&poses[0], &v.delta);
            render_view(&ckpt.fields, &poses, 0, &camera, &set.intrinsics, scales, rcfg)
        })
        .collect()
}

fn view_metrics(r: &RenderedView, g: &GtView, k: usize, scale_err: f64) -> Result<EvalMetrics> {
    let pred = ImageBuf::from_rgb(r.width, r.height, &r.rgb)?;
    let seg = seg_metrics(&r.labels, &g.labels, k, Some(&g.valid))?;
    Ok(EvalMetrics {
        psnr: psnr_masked(&pred, &g.rgb, Some(&g.valid))?,
        ssim: ssim_masked(&pred, &g.rgb, Some(&g.valid))?,
        ssimae: ssimae(&r.depth, &g.depth, &g.valid)?,
        miou: seg.miou,
        pq: seg.pq,
        scale_mse: scale_err,
    })
}

/// Metrics of every sample on every configuration, `[sample][config][view]`.
/// Each sample's views are rendered once and compared with all configurations.
pub fn evaluate_samples(
    ckpt: &Checkpoint,
    bundle: &SceneBundle,
    set: &GtSet,
    samples: &[ScaleCombination],
    cfg: &EvalConfig,
) -> Result<Vec<Vec<Vec<EvalMetrics>>>> {
    if ckpt.num_objects() != set.num_objects || bundle.num_objects() != set.num_objects {
        return Err(Error::Dimension {
            what: "evaluated objects",
            expected: set.num_objects,
            got: ckpt.num_objects(),
        });
    }
    let rcfg = cfg.render_config(ckpt);
    samples
        .iter()
        .map(|s| {
            let renders = render_views(ckpt, bundle, set, s, &rcfg)?;
            let relative: Vec<f64> = s.denorm.iter().map(|m| m / s.denorm[0]).collect();
            set.configs
                .iter()
                .zip(&set.views)
                .map(|(c, gviews)| {
                    let err = scale_mse(&relative, &c.relative)?;
                    renders
                        .par_iter()
                        .zip(gviews)
                        .map(|(r, g)| view_metrics(r, g, set.num_objects, err))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Per configuration, the per-metric best over the first `n` samples of
/// view-averaged metrics.
pub fn best_of(per_sample: &[Vec<Vec<EvalMetrics>>], n: usize) -> Vec<EvalMetrics> {
    let used = &per_sample[..n.min(per_sample.len())];
    let configs = used.first().map_or(0, Vec::len);
    (0..configs)
        .map(|c| {
            used.iter()
                .map(|s| EvalMetrics::mean(&s[c]))
                .reduce(EvalMetrics::better)
                .unwrap_or_default()
        })
        .collect()
}

/// Draws `cfg.n` valid combinations and reports, per ground-truth
/// configuration, the best scores among them next to the fixed baseline.
pub fn best_of_n_eval(ckpt: &Checkpoint, bundle: &SceneBundle, set: &GtSet, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let sampler = SamplerConfig {
        validity_threshold: cfg.validity_threshold,
        max_rejection_attempts: cfg.max_rejection_attempts,
        rng_seed: cfg.seed,
    };
    let samples: Vec<ScaleCombination> = sample_many(&ckpt.scalenet, &ckpt.bounds, &sampler, cfg.n)?
        .into_iter()
        .map(|s| s.scales)
        .collect();
    let fixed_free = vec![cfg.fixed_free; ckpt.num_objects() - 1];
    let fixed = ScaleCombination::from_free(&fixed_free, &ckpt.bounds)?;
    let per_sample = evaluate_samples(ckpt, bundle, set, &samples, cfg)?;
    let fixed_eval = evaluate_samples(ckpt, bundle, set, std::slice::from_ref(&fixed), cfg)?.remove(0);
    let best = best_of(&per_sample, cfg.n);
    let configs: Vec<ConfigResult> = set
        .configs
        .iter()
        .enumerate()
        .map(|(c, gc)| {
            let top = (0..per_sample.len())
                .max_by(|&a, &b| {
                    EvalMetrics::mean(&per_sample[a][c])
                        .psnr
                        .total_cmp(&EvalMetrics::mean(&per_sample[b][c]).psnr)
                })
                .expect("at least one sample");
            ConfigResult {
                config: gc.clone(),
                best: best[c],
                fixed: EvalMetrics::mean(&fixed_eval[c]),
                best_views: per_sample[top][c].clone(),
                fixed_views: fixed_eval[c].clone(),
            }
        })
        .collect();
    let mut curve = Vec::new();
    let mut m = 1;
    while m < cfg.n {
        curve.push(m);
        m *= 2;
    }
    curve.push(cfg.n);
    let best_of_n_curve = curve
        .into_iter()
        .map(|m| {
            let b = best_of(&per_sample, m);
            (m, b.iter().map(|e| e.psnr).sum::<f64>() / b.len().max(1) as f64)
        })
        .collect();
    let best_list: Vec<EvalMetrics> = configs.iter().map(|c| c.best).collect();
    let fixed_list: Vec<EvalMetrics> = configs.iter().map(|c| c.fixed).collect();
    Ok(EvalReport {
        n: cfg.n,
        fixed_free,
        best: MetricSummary::of(&best_list),
        fixed: MetricSummary::of(&fixed_list),
        configs,
        best_of_n_curve,
        oracle: None,
        notes: vec![
            "LPIPS is not computed: it needs a pretrained perceptual network.".into(),
            "Pixels whose surface no training frame observed are excluded.".into(),
        ],
    })
}

fn scores_on_grid(net: &ScaleMlp, oracle: &OracleGrid) -> Result<Vec<f64>> {
    let free = oracle.num_free;
    if free <= 2 {
        let axes: Vec<usize> = (0..free).collect();
        return Ok(scan_valid_region(net, oracle.resolution, &axes, &vec![0.0; free])?.scores);
    }
    let mut pts = Array2::zeros((oracle.len(), free));
    for (i, mut row) in pts.outer_iter_mut().enumerate() {
        row.assign(&ndarray::Array1::from(oracle.point(i)));
    }
    Ok(net.predict_batch(pts.view()))
}

/// Scale-network scores on the oracle's grid: IoU of `{p > threshold}`
/// with the oracle-valid set, and ROC AUC of the scores.
pub fn scalenet_vs_oracle(net: &ScaleMlp, oracle: &OracleGrid, threshold: f64) -> Result<OracleComparison> {
    if net.num_free() != oracle.num_free || oracle.num_free == 0 {
        return Err(Error::Dimension {
            what: "oracle grid axes",
            expected: net.num_free(),
            got: oracle.num_free,
        });
    }
    let scores = scores_on_grid(net, oracle)?;
    if scores.len() != oracle.valid.len() {
        return Err(Error::Dimension {
            what: "oracle grid points",
            expected: scores.len(),
            got: oracle.valid.len(),
        });
    }
    let pred: Vec<bool> = scores.iter().map(|&p| p > threshold).collect();
    let inter = pred.iter().zip(&oracle.valid).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(&oracle.valid).filter(|(a, b)| **a || **b).count();
    Ok(OracleComparison {
        resolution: oracle.resolution,
        threshold,
        iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        auc: roc_auc(&scores, &oracle.valid),
        predicted_valid: pred.iter().filter(|&&v| v).count(),
        oracle_valid: oracle.valid.iter().filter(|&&v| v).count(),
    })
}
