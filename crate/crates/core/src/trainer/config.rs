use serde::{Deserialize, Serialize};

use crate::compositor::LossWeights;
use crate::error::{Error, Result};

/// Every training knob. Deserializing a partial JSON object fills the
/// missing fields with the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Alternation rounds in stage 2.
    pub rounds: usize,
    pub stage1_iters: usize,
    /// Scale-network iterations per stage-2 round.
    pub scalenet_iters: usize,
    /// Field iterations per stage-2 round.
    pub field_iters: usize,
    /// Stage-1 weights; `seg` is ignored.
    pub stage1_weights: LossWeights,
    pub stage2_weights: LossWeights,
    /// Learning rate of the color MLP, the appearance basis and the scale network.
    pub lr: f64,
    /// Learning rate of the plane and line factors.
    pub grid_lr: f64,
    /// Adam epsilon of the field optimizers.
    pub adam_eps: f64,
    /// Rays per object per stage-1 iteration, and per stage-2 field iteration in total.
    pub rays_per_batch: usize,
    /// Rays labelled per scale-network iteration.
    pub label_rays: usize,
    /// Scale combinations labelled per scale-network iteration.
    pub h: usize,
    /// Samples per ray for per-object rendering and soft Z-buffer depths.
    pub samples_per_ray: usize,
    /// Samples per ray over the scene range for composite rendering.
    pub composite_samples: usize,
    /// Final grid resolution per axis.
    pub resolution: usize,
    /// Fraction of the final resolution the grids start from.
    pub coarse_fraction: f64,
    /// Stage-1 iterations at which the grids are upsampled.
    pub upsample_at: Vec<usize>,
    /// Sample weight above which colors are evaluated while training.
    pub weight_threshold: f64,
    pub validity_threshold: f64,
    /// Threshold at the start of the first field phase; it rises linearly
    /// to `validity_threshold` over that phase.
    pub ramp_start: f64,
    /// A field phase samples at most this far below the scale network's best score.
    pub threshold_margin: f64,
    pub max_rejection_attempts: usize,
    pub init_std: f64,
    /// Box padding as a fraction of the largest extent of the observed points.
    pub aabb_pad: f64,
    pub skip_stage1: bool,
    /// Run on a single thread.
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            stage1_iters: 1000,
            scalenet_iters: 1000,
            field_iters: 400,
            stage1_weights: LossWeights {
                rgb: 1.0,
                depth: 1.0,
                seg: 0.0,
            },
            stage2_weights: LossWeights {
                rgb: 1.0,
                depth: 1.0,
                seg: 0.01,
            },
            lr: 0.001,
            grid_lr: 0.02,
            adam_eps: 1e-12,
            rays_per_batch: 512,
            label_rays: 1024,
            h: 64,
            samples_per_ray: 64,
            composite_samples: 128,
            resolution: 64,
            coarse_fraction: 0.4,
            upsample_at: vec![250, 500, 750],
            weight_threshold: 1e-7,
            validity_threshold: 0.95,
            ramp_start: 0.5,
            threshold_margin: 0.02,
            max_rejection_attempts: 100_000,
            init_std: 0.1,
            aabb_pad: 0.1,
            skip_stage1: false,
            deterministic: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(format!("train config: {msg}")));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        for w in [&self.stage1_weights, &self.stage2_weights] {
            if ![w.rgb, w.depth, w.seg].iter().all(|v| v.is_finite() && *v >= 0.0) {
                return bad("loss weights must be finite and non-negative");
            }
        }
        if !(self.lr > 0.0 && self.grid_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.rays_per_batch == 0 || self.label_rays == 0 || self.h == 0 {
            return bad("batch sizes must be positive");
        }
        if self.samples_per_ray < 2 || self.composite_samples < 2 {
            return bad("samples per ray must be at least 2");
        }
        if self.resolution < 2 || !(self.coarse_fraction > 0.0 && self.coarse_fraction <= 1.0) {
            return bad("invalid grid resolution schedule");
        }
        if !(self.validity_threshold > 0.0 && self.validity_threshold < 1.0)
            || !(self.ramp_start > 0.0 && self.ramp_start <= self.validity_threshold)
        {
            return bad("thresholds must satisfy 0 < ramp_start <= validity_threshold < 1");
        }
        if !(self.weight_threshold >= 0.0) {
            return bad("weight_threshold must be non-negative");
        }
        if !(self.threshold_margin >= 0.0 && self.threshold_margin < 1.0) {
            return bad("threshold_margin must lie in [0, 1)");
        }
        if self.max_rejection_attempts == 0 {
            return bad("max_rejection_attempts must be positive");
        }
        if !(self.init_std >= 0.0 && self.aabb_pad >= 0.0) {
            return bad("init_std and aabb_pad must be non-negative");
        }
        Ok(())
    }

    pub fn coarse_resolution(&self) -> usize {
        ((self.coarse_fraction * self.resolution as f64).ceil() as usize).clamp(2, self.resolution)
    }

    /// Grid resolution after each upsampling step, geometric between the
    /// coarse and final resolutions.
    pub fn resolution_steps(&self) -> Vec<usize> {
        let n = self.upsample_at.len();
        let (lo, hi) = (self.coarse_resolution() as f64, self.resolution as f64);
        (1..=n)
            .map(|i| (lo * (hi / lo).powf(i as f64 / n as f64)).round() as usize)
            .map(|r| r.min(self.resolution))
            .collect()
    }
}
