use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

/// Signed-distance primitives in body coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Box { center: Vec3, half: Vec3 },
    Sphere { center: Vec3, radius: f64 },
    Capsule { a: Vec3, b: Vec3, radius: f64 },
    /// Interior of a closed box: positive inside, zero on the walls.
    Room { half: Vec3 },
    Union(Vec<Shape>),
}

fn sdf_box(p: &Vec3, center: &Vec3, half: &Vec3) -> f64 {
    let q = (p - center).abs() - half;
    let outside = q.map(|v| v.max(0.0)).norm();
    let inside = q.x.max(q.y).max(q.z).min(0.0);
    outside + inside
}

impl Shape {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Box { center, half } => sdf_box(p, center, half),
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Capsule { a, b, radius } => {
                let pa = p - a;
                let ba = b - a;
                let h = (pa.dot(&ba) / ba.norm_squared()).clamp(0.0, 1.0);
                (pa - ba * h).norm() - radius
            }
            Shape::Room { half } => -sdf_box(p, &Vec3::zeros(), half),
            Shape::Union(parts) => parts.iter().map(|s| s.sdf(p)).fold(f64::INFINITY, f64::min),
        }
    }

    /// Outward unit normal from central differences.
    pub fn normal(&self, p: &Vec3) -> Vec3 {
        let h = 1e-5;
        let g = Vec3::new(
            self.sdf(&(p + Vec3::x() * h)) - self.sdf(&(p - Vec3::x() * h)),
            self.sdf(&(p + Vec3::y() * h)) - self.sdf(&(p - Vec3::y() * h)),
            self.sdf(&(p + Vec3::z() * h)) - self.sdf(&(p - Vec3::z() * h)),
        );
        let n = g.norm();
        if n > 0.0 {
            g / n
        } else {
            Vec3::z()
        }
    }
}

pub const HIT_EPS: f64 = 1e-7;
const MAX_STEPS: usize = 512;

/// First hit distance along a unit-direction ray, by sphere tracing.
pub fn sphere_trace(shape: &Shape, origin: &Vec3, dir: &Vec3, t_max: f64) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..MAX_STEPS {
        let d = shape.sdf(&(origin + dir * t));
        if d < HIT_EPS {
            return Some(t);
        }
        t += d;
        if t > t_max {
            return None;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_hit_through_center() {
        let s = Shape::Sphere {
            center: Vec3::new(0.0, 0.0, 5.0),
            radius: 1.5,
        };
        let t = sphere_trace(&s, &Vec3::zeros(), &Vec3::z(), 100.0).unwrap();
        assert!((t - 3.5).abs() < 1e-4);
    }

    #[test]
    fn room_is_hit_from_inside() {
        let s = Shape::Room {
            half: Vec3::new(2.0, 2.0, 3.0),
        };
        let t = sphere_trace(&s, &Vec3::zeros(), &Vec3::z(), 100.0).unwrap();
        assert!((t - 3.0).abs() < 1e-4);
        let n = s.normal(&Vec3::new(0.0, 0.0, 3.0));
        assert!((n - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-4);
    }

    #[test]
    fn sdf_is_lipschitz() {
        let s = Shape::Union(vec![
            Shape::Box {
                center: Vec3::new(0.3, 0.0, 0.0),
                half: Vec3::new(0.4, 0.2, 0.5),
            },
            Shape::Capsule {
                a: Vec3::zeros(),
                b: Vec3::new(0.0, 1.0, 0.0),
                radius: 0.2,
            },
        ]);
        for i in 0..200 {
            let a = Vec3::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), (i as f64 * 0.53).sin());
            let b = a + Vec3::new(0.01, -0.02, 0.015) * ((i % 7) as f64);
            assert!((s.sdf(&a) - s.sdf(&b)).abs() <= (a - b).norm() + 1e-12);
        }
    }
}
