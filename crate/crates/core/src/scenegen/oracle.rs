use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bundle::{true_free_scales, GtSidecar, SceneBundle};
use crate::error::{Error, Result};
use crate::scalenet::grid_coord;

/// Required fraction of occlusion-relevant pixels whose front-most object matches the mask.
pub const THETA_AGREE: f64 = 0.999;

/// A pixel where at least two objects lie on the ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevantPixel {
    pub frame: usize,
    pub pixel: usize,
    pub visible: usize,
    /// Emitted-unit depth of each object traced alone; infinite on a miss.
    pub depths: Vec<f64>,
}

pub fn relevant_pixels(bundle: &SceneBundle, gt: &GtSidecar) -> Vec<RelevantPixel> {
    let k = bundle.num_objects();
    let mut out = Vec::new();
    for n in 0..bundle.num_frames() {
        for p in 0..bundle.num_pixels() {
            let depths: Vec<f64> = (0..k)
                .map(|j| match gt.isolated[j][n][p] {
                    d if d > 0.0 => d as f64,
                    _ => f64::INFINITY,
                })
                .collect();
            if depths.iter().filter(|d| d.is_finite()).count() >= 2 {
                out.push(RelevantPixel {
                    frame: n,
                    pixel: p,
                    visible: bundle.masks[n][p] as usize,
                    depths,
                });
            }
        }
    }
    out
}

/// Index of the smallest scaled depth; ties go to the lowest index.
pub fn front_most(depths: &[f64], multipliers: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, (&d, &s)) in depths.iter().zip(multipliers).enumerate() {
        let v = s * d;
        if v < best_d {
            best = k;
            best_d = v;
        }
    }
    best
}

/// Fraction of relevant pixels whose front-most object under `multipliers` is the visible one.
pub fn agreement(pixels: &[RelevantPixel], multipliers: &[f64]) -> f64 {
    if pixels.is_empty() {
        return 1.0;
    }
    let hits = pixels
        .iter()
        .filter(|px| front_most(&px.depths, multipliers) == px.visible)
        .count();
    hits as f64 / pixels.len() as f64
}

/// Validity over a regular grid of all free scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleGrid {
    pub resolution: usize,
    pub num_free: usize,
    pub theta: f64,
    /// Row-major over free axes, first axis slowest.
    pub agreement: Vec<f64>,
    pub valid: Vec<bool>,
    /// Normalized free scales of the true gauge.
    pub truth: Vec<f64>,
}

impl OracleGrid {
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.num_free];
        let mut rem = flat;
        for a in (0..self.num_free).rev() {
            idx[a] = rem % self.resolution;
            rem /= self.resolution;
        }
        idx.iter().map(|&i| grid_coord(i, self.resolution)).collect()
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len().max(1) as f64
    }
}

/// Brute-force validity of free scales given ground-truth isolated depths.
pub fn oracle_valid_at(bundle: &SceneBundle, pixels: &[RelevantPixel], free: &[f64], theta: f64) -> Result<(bool, f64)> {
    let mut mult = vec![bundle.bounds().denormalize(0, 1.0)?];
    for (j, &s) in free.iter().enumerate() {
        mult.push(bundle.bounds().denormalize(j + 1, s)?);
    }
    let a = agreement(pixels, &mult);
    Ok((a >= theta, a))
}

pub fn oracle_valid_region(bundle: &SceneBundle, gt: &GtSidecar, resolution: usize, theta: f64) -> Result<OracleGrid> {
    if resolution < 2 {
        return Err(Error::Domain("grid resolution must be at least 2".into()));
    }
    let k = bundle.num_objects();
    if gt.isolated.len() != k {
        return Err(Error::Dimension {
            what: "ground-truth objects",
            expected: k,
            got: gt.isolated.len(),
        });
    }
    let pixels = relevant_pixels(bundle, gt);
    let num_free = k - 1;
    let total = resolution.pow(num_free as u32);
    let mut grid = OracleGrid {
        resolution,
        num_free,
        theta,
        agreement: Vec::new(),
        valid: Vec::new(),
        truth: true_free_scales(bundle.bounds(), &gt.lambda),
    };
    let results: Vec<Result<(bool, f64)>> = (0..total)
        .into_par_iter()
        .map(|flat| oracle_valid_at(bundle, &pixels, &grid.point(flat), theta))
        .collect();
    for r in results {
        let (v, a) = r?;
        grid.valid.push(v);
        grid.agreement.push(a);
    }
    Ok(grid)
}
