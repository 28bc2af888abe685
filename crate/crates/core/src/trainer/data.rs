use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::compositor::PixelTarget;
use crate::error::{Error, Result};
use crate::geometry::{pixel_to_ray, Ray, Vec3};
use crate::objectfield::Aabb;
use crate::scenegen::SceneBundle;

/// A training pixel: frame index and row-major pixel index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRef {
    pub frame: u32,
    pub pixel: u32,
}

/// Mask pixels of every object, for stratified ray sampling.
#[derive(Clone, Debug)]
pub struct RayPool {
    pub per_object: Vec<Vec<PixelRef>>,
}

impl RayPool {
    pub fn new(bundle: &SceneBundle) -> Result<Self> {
        let mut per_object = vec![Vec::new(); bundle.num_objects()];
        for (n, mask) in bundle.masks.iter().enumerate() {
            for (p, &id) in mask.iter().enumerate() {
                per_object[id as usize].push(PixelRef {
                    frame: n as u32,
                    pixel: p as u32,
                });
            }
        }
        if let Some(k) = per_object.iter().position(Vec::is_empty) {
            return Err(Error::EmptyObject(k));
        }
        Ok(Self { per_object })
    }

    /// `count` pixels of object `k`, uniformly with replacement.
    pub fn sample(&self, k: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<PixelRef> {
        let pool = &self.per_object[k];
        (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// The camera ray of a pixel expressed in the space of object `owner`.
pub fn pixel_ray(bundle: &SceneBundle, owner: usize, px: PixelRef) -> Result<Ray> {
    let w = bundle.manifest.width;
    let p = px.pixel as usize;
    let pose = bundle.pose(owner, px.frame as usize)?;
    let mut ray = pixel_to_ray((p / w, p % w), bundle.intrinsics(), pose)?;
    ray.frame = px.frame as usize;
    ray.owner = owner;
    Ok(ray)
}

pub fn pixel_target(bundle: &SceneBundle, owner: usize, px: PixelRef) -> PixelTarget {
    let (n, p) = (px.frame as usize, px.pixel as usize);
    PixelTarget {
        color: bundle.color(n, p),
        depth: bundle.depths[owner][n][p] as f64,
        object: owner,
    }
}

/// Box around every back-projected depth sample of object `k`, padded on
/// each side by `pad` times its largest extent.
pub fn estimate_aabb(bundle: &SceneBundle, pool: &RayPool, k: usize, pad: f64) -> Result<Aabb> {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &px in &pool.per_object[k] {
        let d = bundle.depths[k][px.frame as usize][px.pixel as usize] as f64;
        if d > 0.0 {
            let ray = pixel_ray(bundle, k, px)?;
            let x = ray.origin + ray.direction * d;
            lo = lo.inf(&x);
            hi = hi.sup(&x);
        }
    }
    if !lo.iter().all(|v| v.is_finite()) {
        return Err(Error::EmptyObject(k));
    }
    let extent = (hi - lo).max().max(1e-6);
    let margin = pad * extent;
    Aabb::new(
        [lo.x - margin, lo.y - margin, lo.z - margin],
        [hi.x + margin, hi.y + margin, hi.z + margin],
    )
}

/// The object with the largest summed mask area (lowest index on ties)
/// first, then the others in index order.
pub fn anchor_order(bundle: &SceneBundle) -> Vec<usize> {
    let area = bundle.mask_areas();
    let anchor = (0..area.len()).fold(0, |best, k| if area[k] > area[best] { k } else { best });
    std::iter::once(anchor).chain((0..area.len()).filter(|&k| k != anchor)).collect()
}
