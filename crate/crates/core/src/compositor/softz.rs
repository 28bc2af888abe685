use serde::{Deserialize, Serialize};

use super::render::{argmax, frame_poses, ray_in_object};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Ray, ScaleBounds, ScaleCombination};
use crate::objectfield::{render_rays, RenderConfig, VmField};
use crate::real::Real;

/// Objects blocking less than this fraction of a ray count as absent, so
/// faint halos around a silhouette never act as occluders.
pub const SOFT_Z_MIN_OPACITY: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftZConfig {
    /// Scale combinations labelled per ray batch.
    pub h: usize,
    pub samples_per_ray: usize,
}

impl Default for SoftZConfig {
    fn default() -> Self {
        Self {
            h: 64,
            samples_per_ray: 64,
        }
    }
}

impl SoftZConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 {
            return Err(Error::Domain("H must be at least 1".into()));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::Domain("samples_per_ray must be at least 2".into()));
        }
        Ok(())
    }
}

/// Per-object depths of many rays, each in its object's own metric.
/// Objects absent along a ray report `+inf`.
pub fn soft_z_depths_batch<T: Real>(
    fields: &[VmField<T>],
    tracks: &[Vec<Pose>],
    bounds: &ScaleBounds,
    rays: &[Ray],
    samples_per_ray: usize,
) -> Result<Vec<Vec<f64>>> {
    let k = fields.len();
    if tracks.len() != k || bounds.num_objects() != k {
        return Err(Error::Dimension {
            what: "objects",
            expected: k,
            got: if tracks.len() != k { tracks.len() } else { bounds.num_objects() },
        });
    }
    let unit = vec![1.0; k];
    let mut per_object: Vec<Vec<crate::geometry::Ray>> = vec![Vec::with_capacity(rays.len()); k];
    let mut cache: Option<(usize, Vec<Pose>)> = None;
    for ray in rays {
        if cache.as_ref().map(|(n, _)| *n) != Some(ray.frame) {
            cache = Some((ray.frame, frame_poses(tracks, ray.frame)?));
        }
        let poses = &cache.as_ref().expect("cached").1;
        if ray.owner >= k {
            return Err(Error::Dimension {
                what: "ray owner",
                expected: k,
                got: ray.owner,
            });
        }
        for (j, list) in per_object.iter_mut().enumerate() {
            let (origin, direction) = ray_in_object(ray, poses, &unit, j);
            list.push(Ray {
                origin,
                direction,
                frame: ray.frame,
                owner: j,
                pixel: ray.pixel,
            });
        }
    }
    let mut out = vec![vec![f64::INFINITY; k]; rays.len()];
    for (j, field) in fields.iter().enumerate() {
        let cfg = RenderConfig {
            samples_per_ray,
            near: bounds.near_obj[j],
            far: bounds.far_obj[j],
            white_background: false,
            weight_threshold: f64::INFINITY,
        };
        let (renders, _) = render_rays(field, &per_object[j], &cfg, None)?;
        for (row, r) in out.iter_mut().zip(renders) {
            if r.opacity.to_f64_lossy() >= SOFT_Z_MIN_OPACITY {
                row[j] = r.depth.to_f64_lossy();
            }
        }
    }
    Ok(out)
}

/// Per-object depths along one ray via independent renders in each object's
/// space over that object's own near/far range.
pub fn soft_z_depths<T: Real>(
    fields: &[VmField<T>],
    poses: &[Pose],
    bounds: &ScaleBounds,
    ray: &Ray,
    samples_per_ray: usize,
) -> Result<Vec<f64>> {
    if poses.len() != fields.len() {
        return Err(Error::Dimension {
            what: "object poses",
            expected: fields.len(),
            got: poses.len(),
        });
    }
    let tracks: Vec<Vec<Pose>> = poses
        .iter()
        .map(|p| {
            let mut t = vec![Pose::identity(); ray.frame + 1];
            t[ray.frame] = p.clone();
            t
        })
        .collect();
    Ok(soft_z_depths_batch(fields, &tracks, bounds, std::slice::from_ref(ray), samples_per_ray)?.remove(0))
}

/// Softmax over negated scaled depths. Infinite depths get zero mass unless
/// every depth is infinite, which yields the uniform vector.
pub fn soft_z_segmentation(depths: &[f64], scales: &ScaleCombination) -> Vec<f64> {
    let logits: Vec<f64> = depths
        .iter()
        .zip(&scales.denorm)
        .map(|(&d, &s)| if d.is_finite() { -(s * d) } else { f64::NEG_INFINITY })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![1.0 / depths.len() as f64; depths.len()];
    }
    let e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// 1 when the most likely object is the ground-truth one.
pub fn pseudo_label<T: Real>(seg: &[T], gt_object: usize) -> f64 {
    if argmax(seg) == gt_object {
        1.0
    } else {
        0.0
    }
}

/// Labels every `(combination, ray)` pair from one depth pass per ray.
/// Row `h` holds the labels of `combos[h]`; the ground truth is each ray's owner.
pub fn batch_pseudo_labels<T: Real>(
    fields: &[VmField<T>],
    tracks: &[Vec<Pose>],
    bounds: &ScaleBounds,
    rays: &[Ray],
    combos: &[ScaleCombination],
    samples_per_ray: usize,
) -> Result<Vec<Vec<f64>>> {
    if combos.is_empty() {
        return Err(Error::Domain("H must be at least 1".into()));
    }
    let depths = soft_z_depths_batch(fields, tracks, bounds, rays, samples_per_ray)?;
    Ok(labels_from_depths(&depths, rays.iter().map(|r| r.owner), combos))
}

/// Labels from precomputed per-object depths.
pub fn labels_from_depths(
    depths: &[Vec<f64>],
    owners: impl Iterator<Item = usize> + Clone,
    combos: &[ScaleCombination],
) -> Vec<Vec<f64>> {
    combos
        .iter()
        .map(|c| {
            depths
                .iter()
                .zip(owners.clone())
                .map(|(d, owner)| pseudo_label(&soft_z_segmentation(d, c), owner))
                .collect()
        })
        .collect()
}
