//! Rigid transforms, camera rays and the scale-aware coordinate changes
//! between object spaces.
//!
//! A [`Pose`] is a camera-to-object transform: applying it to a point in
//! camera coordinates yields the point in the object's (up-to-scale) space.
//! Object spaces differ from each other by a rigid motion *and* an unknown
//! per-object scale; the scale is applied about the camera center, which is
//! the only point every object space agrees on.

use nalgebra::{Rotation3, Vector3};

pub use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with det +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().all(|v| v.is_finite()) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("pose has non-finite entries".into()));
        }
        let rrt = self.rotation * self.rotation.transpose();
        let ortho = (rrt - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!(
                "rotation not orthonormal (|RR^T - I| = {ortho:.2e}, det = {det:.6})"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_inverse(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    #[inline]
    pub fn rotate(&self, d: &Vec3) -> Vec3 {
        self.rotation * d
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Row-major `[R | t]` as 12 floats.
    pub fn to_row_major(&self) -> [f32; 12] {
        let mut out = [0f32; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)] as f32;
            }
            out[r * 4 + 3] = self.translation[r] as f32;
        }
        out
    }

    /// Inverse of [`Pose::to_row_major`]. Rotations read back from `f32` are
    /// re-orthonormalized only by validation tolerance, not modified.
    pub fn from_row_major(v: &[f32]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::Dimension {
                what: "pose floats",
                expected: 12,
                got: v.len(),
            });
        }
        let rotation = Matrix3::from_fn(|r, c| v[r * 4 + c] as f64);
        let translation = Vec3::new(v[3] as f64, v[7] as f64, v[11] as f64);
        let pose = Self {
            rotation,
            translation,
        };
        // f32 storage loses ~1e-7; accept that.
        let rrt = pose.rotation * pose.rotation.transpose();
        if (rrt - Matrix3::identity()).abs().max() > 1e-5 {
            return Err(Error::Domain("stored rotation is not orthonormal".into()));
        }
        Ok(pose)
    }

    /// Camera looking from `eye` towards `target` (camera +z forward, +y down).
    pub fn look_at(eye: Vec3, target: Vec3, world_up: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&world_up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self {
            rotation,
            translation: eye,
        }
    }
}

/// Pinhole intrinsics. Pixel `(row, col)` has its center at `(col + 0.5, row + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self {
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }

    /// Same field of view at a different image size.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    /// Unit viewing direction through a pixel center, in camera coordinates.
    pub fn camera_direction(&self, row: usize, col: usize) -> Vec3 {
        Vec3::new(
            (col as f64 + 0.5 - self.cx) / self.fx,
            (row as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
        .normalize()
    }

    pub fn project(&self, p_cam: &Vec3) -> Option<(f64, f64)> {
        if p_cam.z <= 1e-9 {
            return None;
        }
        Some((
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub frame: usize,
    /// Index of the object whose space the ray is expressed in.
    pub owner: usize,
    pub pixel: (usize, usize),
}

/// Near/far distances per object (each in its own up-to-scale metric) and
/// for the shared scene volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleBounds {
    pub near_obj: Vec<f64>,
    pub far_obj: Vec<f64>,
    pub near_scene: f64,
    pub far_scene: f64,
}

impl ScaleBounds {
    pub fn num_objects(&self) -> usize {
        self.near_obj.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.near_obj.len() != self.far_obj.len() || self.near_obj.is_empty() {
            return Err(Error::Domain("per-object bounds must be non-empty and paired".into()));
        }
        let finite = |x: f64| x.is_finite() && x > 0.0;
        for (k, (&n, &f)) in self.near_obj.iter().zip(&self.far_obj).enumerate() {
            if !finite(n) || !finite(f) || f <= n {
                return Err(Error::Domain(format!("object {k}: invalid near/far ({n}, {f})")));
            }
        }
        if !finite(self.near_scene) || !finite(self.far_scene) || self.far_scene <= self.near_scene {
            return Err(Error::Domain("invalid scene near/far".into()));
        }
        let min_near = self.near_obj.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_far = self.far_obj.iter().cloned().fold(0.0, f64::max);
        if self.near_scene > min_near || self.far_scene < max_far {
            return Err(Error::Domain(
                "scene bounds must enclose every object's near/far range".into(),
            ));
        }
        Ok(())
    }

    /// Maps object `k`'s normalized scale to its denormalized scale.
    pub fn denormalize(&self, k: usize, s: f64) -> Result<f64> {
        let n = *self.near_obj.get(k).ok_or(Error::Dimension {
            what: "object index",
            expected: self.near_obj.len(),
            got: k,
        })?;
        denormalize_scale(s, n, self.far_obj[k], self.near_scene, self.far_scene)
    }

    /// Inverse of [`ScaleBounds::denormalize`].
    pub fn normalize(&self, k: usize, sbar: f64) -> f64 {
        let lo = self.near_scene / self.near_obj[k];
        let hi = self.far_scene / self.far_obj[k];
        (sbar - lo) / (hi - lo)
    }
}

/// Linear map from a normalized scale to a metric multiplier:
/// `(near_scene/near_obj)(1 - s) + (far_scene/far_obj) s`.
pub fn denormalize_scale(s: f64, near_obj: f64, far_obj: f64, near_scene: f64, far_scene: f64) -> Result<f64> {
    let ok = |x: f64| x.is_finite() && x != 0.0;
    if !s.is_finite() || !ok(near_obj) || !ok(far_obj) || !ok(near_scene) || !ok(far_scene) {
        return Err(Error::Domain(format!(
            "denormalize_scale: invalid input s={s}, bounds=({near_obj}, {far_obj}, {near_scene}, {far_scene})"
        )));
    }
    Ok((near_scene / near_obj) * (1.0 - s) + (far_scene / far_obj) * s)
}

/// A normalized scale per object (anchor first, pinned at 1) together with
/// the denormalized multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleCombination {
    pub normalized: Vec<f64>,
    pub denorm: Vec<f64>,
}

impl ScaleCombination {
    /// From the full vector `[1, s_2, .., s_K]`.
    pub fn new(normalized: Vec<f64>, bounds: &ScaleBounds) -> Result<Self> {
        if normalized.len() != bounds.num_objects() {
            return Err(Error::Dimension {
                what: "scale combination",
                expected: bounds.num_objects(),
                got: normalized.len(),
            });
        }
        if normalized[0] != 1.0 {
            return Err(Error::Domain("anchor scale must be exactly 1".into()));
        }
        if let Some(bad) = normalized[1..].iter().find(|s| !(0.0..1.0).contains(*s)) {
            return Err(Error::Domain(format!("normalized scale {bad} outside [0, 1)")));
        }
        let denorm = normalized
            .iter()
            .enumerate()
            .map(|(k, &s)| bounds.denormalize(k, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { normalized, denorm })
    }

    /// From the free scales `[s_2, .., s_K]`.
    pub fn from_free(free: &[f64], bounds: &ScaleBounds) -> Result<Self> {
        let mut v = Vec::with_capacity(free.len() + 1);
        v.push(1.0);
        v.extend_from_slice(free);
        Self::new(v, bounds)
    }

    /// Explicit multipliers, bypassing the normalized range. Used for
    /// single-object rendering and tests.
    pub fn from_denorm(denorm: Vec<f64>) -> Result<Self> {
        if denorm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Domain("denormalized scales must be positive".into()));
        }
        let mut normalized = vec![0.0; denorm.len()];
        if let Some(first) = normalized.first_mut() {
            *first = 1.0;
        }
        Ok(Self { normalized, denorm })
    }

    pub fn len(&self) -> usize {
        self.denorm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.denorm.is_empty()
    }

    pub fn free(&self) -> &[f64] {
        &self.normalized[1..]
    }

    /// Reorders objects: entry `i` of the result is entry `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            normalized: perm.iter().map(|&i| self.normalized[i]).collect(),
            denorm: perm.iter().map(|&i| self.denorm[i]).collect(),
        }
    }
}

/// Maps a point from object `k`'s space to object `k̂`'s space under the
/// given denormalized scales: back to the camera, rescale about the camera
/// center by `s̄_k / s̄_k̂`, then into `k̂`.
pub fn transform_point_between_objects(p: &Vec3, pose_k: &Pose, pose_khat: &Pose, sbar_k: f64, sbar_khat: f64) -> Vec3 {
    let cam = pose_k.apply_inverse(p);
    pose_khat.apply(&(cam * (sbar_k / sbar_khat)))
}

/// Rotates a viewing direction from object `k`'s space to object `k̂`'s space.
pub fn transform_direction_between_objects(d: &Vec3, pose_k: &Pose, pose_khat: &Pose) -> Vec3 {
    let cam = pose_k.rotation.transpose() * d;
    (pose_khat.rotation * cam).normalize()
}

/// Casts the ray through a pixel center into the object space of `pose`.
pub fn pixel_to_ray(pixel: (usize, usize), intrinsics: &Intrinsics, pose: &Pose) -> Result<Ray> {
    let (row, col) = pixel;
    if row >= intrinsics.height || col >= intrinsics.width {
        return Err(Error::PixelOutOfBounds {
            row,
            col,
            width: intrinsics.width,
            height: intrinsics.height,
        });
    }
    let d_cam = intrinsics.camera_direction(row, col);
    Ok(Ray {
        origin: pose.translation,
        direction: pose.rotate(&d_cam).normalize(),
        frame: 0,
        owner: 0,
        pixel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    fn bounds() -> ScaleBounds {
        ScaleBounds {
            near_obj: vec![2.0],
            far_obj: vec![4.0],
            near_scene: 1.0,
            far_scene: 8.0,
        }
    }

    #[test]
    fn denormalize_endpoints_and_midpoint() {
        let b = bounds();
        assert_eq!(b.denormalize(0, 0.0).unwrap(), 0.5);
        assert_eq!(b.denormalize(0, 1.0).unwrap(), 2.0);
        assert_eq!(b.denormalize(0, 0.5).unwrap(), 1.25);
    }

    #[test]
    fn denormalize_rejects_bad_input() {
        assert!(denormalize_scale(f64::NAN, 2.0, 4.0, 1.0, 8.0).is_err());
        assert!(denormalize_scale(0.5, 0.0, 4.0, 1.0, 8.0).is_err());
        assert!(denormalize_scale(0.5, 2.0, 4.0, 1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn normalize_inverts_denormalize() {
        let b = bounds();
        for s in [0.0, 0.3, 0.99] {
            let sbar = b.denormalize(0, s).unwrap();
            assert!((b.normalize(0, sbar) - s).abs() < 1e-12);
        }
    }

    #[test]
    fn point_transform_examples() {
        let id = Pose::identity();
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(transform_point_between_objects(&p, &id, &id, 1.0, 1.0), p);
        let q = transform_point_between_objects(&Vec3::new(1.0, 0.0, 0.0), &id, &id, 2.0, 1.0);
        assert_eq!(q, Vec3::new(2.0, 0.0, 0.0));
        let shifted = Pose::from_translation(Vec3::new(0.0, 0.0, 1.0));
        let r = transform_point_between_objects(&Vec3::zeros(), &id, &shifted, 1.0, 1.0);
        assert_eq!(r, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn direction_transform_examples() {
        let id = Pose::identity();
        let z = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(transform_direction_between_objects(&z, &id, &id), z);
        let rz = Pose::from_axis_angle(Vec3::z(), std::f64::consts::FRAC_PI_2, Vec3::zeros());
        let d = transform_direction_between_objects(&Vec3::x(), &id, &rz);
        assert!(close(&d, &Vec3::y(), 1e-12));
        let a = Pose::from_translation(Vec3::new(3.0, -1.0, 2.0));
        let b = Pose::from_translation(Vec3::new(-5.0, 0.5, 0.0));
        let d = Vec3::new(0.6, 0.0, 0.8);
        assert!(close(&transform_direction_between_objects(&d, &a, &b), &d, 1e-15));
    }

    #[test]
    fn pixel_to_ray_examples() {
        let k = Intrinsics {
            fx: 10.0,
            fy: 10.0,
            cx: 2.5,
            cy: 2.5,
            width: 5,
            height: 5,
        };
        let ray = pixel_to_ray((2, 2), &k, &Pose::identity()).unwrap();
        assert!(close(&ray.direction, &Vec3::z(), 1e-15));
        assert_eq!(ray.origin, Vec3::zeros());

        let ray = pixel_to_ray((2, 3), &k, &Pose::identity()).unwrap();
        let expect = Vec3::new(0.1, 0.0, 1.0).normalize();
        assert!(close(&ray.direction, &expect, 1e-15));

        // The camera center is where the camera-to-object pose sends the camera origin.
        let pose = Pose::from_axis_angle(Vec3::new(1.0, 2.0, 0.5), 0.7, Vec3::new(0.3, -2.0, 1.5));
        let ray = pixel_to_ray((0, 0), &k, &pose).unwrap();
        assert!(close(&ray.origin, &pose.apply(&Vec3::zeros()), 1e-15));
        assert!(close(&pose.inverse().apply(&ray.origin), &Vec3::zeros(), 1e-12));

        assert!(matches!(
            pixel_to_ray((5, 0), &k, &Pose::identity()),
            Err(Error::PixelOutOfBounds { .. })
        ));
    }

    #[test]
    fn scale_combination_contract() {
        let b = ScaleBounds {
            near_obj: vec![2.0, 1.5, 3.0],
            far_obj: vec![9.0, 4.0, 5.0],
            near_scene: 1.0,
            far_scene: 10.0,
        };
        b.validate().unwrap();
        let c = ScaleCombination::from_free(&[0.2, 0.9], &b).unwrap();
        assert_eq!(c.normalized[0], 1.0);
        assert!(c.denorm.iter().all(|s| *s > 0.0));
        assert!(ScaleCombination::from_free(&[1.0, 0.5], &b).is_err());
        assert!(ScaleCombination::new(vec![0.9, 0.1, 0.1], &b).is_err());
        assert!(ScaleCombination::from_free(&[0.1], &b).is_err());
    }

    #[test]
    fn bounds_must_enclose() {
        let mut b = ScaleBounds {
            near_obj: vec![2.0, 1.5],
            far_obj: vec![9.0, 4.0],
            near_scene: 1.6,
            far_scene: 10.0,
        };
        assert!(b.validate().is_err());
        b.near_scene = 1.0;
        b.validate().unwrap();
    }

    #[test]
    fn pose_serialization_layout() {
        let pose = Pose::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), 0.25, Vec3::new(1.0, 2.0, 3.0));
        let v = pose.to_row_major();
        assert_eq!(v[3], 1.0);
        assert_eq!(v[7], 2.0);
        assert_eq!(v[11], 3.0);
        let back = Pose::from_row_major(&v).unwrap();
        assert!((back.rotation - pose.rotation).abs().max() < 1e-7);
    }
}
