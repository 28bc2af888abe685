use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sdf::{sphere_trace, Shape};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, Vec3};

pub const ROOM_HALF: [f64; 3] = [4.0, 2.5, 4.0];
const T_MAX: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub name: String,
    pub shape: Shape,
    pub color: [f64; 3],
    /// Checker cell size in body units.
    pub checker: f64,
    /// Object-to-world pose per frame.
    pub trajectory: Vec<Pose>,
    /// World-space scale of the body coordinates.
    pub true_size: f64,
}

impl WorldObject {
    pub fn albedo(&self, body: &Vec3) -> [f64; 3] {
        let c = (body / self.checker).map(f64::floor);
        let parity = (c.x + c.y + c.z).rem_euclid(2.0);
        let k = if parity < 0.5 { 1.0 } else { 0.55 };
        self.color.map(|v| v * k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub objects: Vec<WorldObject>,
    /// Camera-to-world pose per frame.
    pub cameras: Vec<Pose>,
    pub intrinsics: Intrinsics,
    /// Unit vector towards the light.
    pub light: Vec3,
    pub ambient: f64,
}

impl World {
    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_frames(&self) -> usize {
        self.cameras.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub seed: u64,
    pub objects: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub max_retries: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            seed: 7,
            objects: 2,
            frames: 15,
            width: 64,
            height: 64,
            fov_deg: 60.0,
            max_retries: 32,
        }
    }
}

/// One object placed for rendering: its pose and an optional uniform
/// rescaling about a world-space center.
#[derive(Clone, Debug)]
pub struct Placement {
    pub pose: Pose,
    pub center: Vec3,
    pub factor: f64,
}

impl Placement {
    pub fn rigid(pose: Pose) -> Self {
        Self {
            pose,
            center: Vec3::zeros(),
            factor: 1.0,
        }
    }
}

/// Per-pixel ray tracing results, row-major.
#[derive(Clone, Debug)]
pub struct TraceOutput {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    /// Ray distance to the visible surface.
    pub depth: Vec<f64>,
    /// Visible object index.
    pub mask: Vec<usize>,
    /// `[object][pixel]` ray distance of each object alone; infinite on a miss.
    pub isolated: Vec<Vec<f64>>,
    /// Visible hit point in the visible object's body coordinates.
    pub body_hit: Vec<Vec3>,
}

fn hit_object(obj: &WorldObject, place: &Placement, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
    // Undo the rescaling, then move into body coordinates.
    let o = place.center + (origin - place.center) / place.factor;
    let bo = place.pose.apply_inverse(&o);
    let bd = place.pose.rotation.transpose() * dir;
    let t = sphere_trace(&obj.shape, &bo, &bd, T_MAX)?;
    Some((t * place.factor, bo + bd * t))
}

/// Traces every pixel of a camera against placed objects.
pub fn raytrace_view(world: &World, placements: &[Placement], camera: &Pose, intrinsics: &Intrinsics) -> TraceOutput {
    let k = world.objects.len();
    let n = intrinsics.num_pixels();
    let per_pixel: Vec<_> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let (row, col) = (idx / intrinsics.width, idx % intrinsics.width);
            let dir = camera.rotate(&intrinsics.camera_direction(row, col)).normalize();
            let origin = camera.translation;
            let mut iso = vec![f64::INFINITY; k];
            let mut best: Option<(usize, Vec3)> = None;
            for (j, (obj, place)) in world.objects.iter().zip(placements).enumerate() {
                if let Some((t, body)) = hit_object(obj, place, &origin, &dir) {
                    iso[j] = t;
                    if best.is_none() || t < iso[best.as_ref().unwrap().0] {
                        best = Some((j, body));
                    }
                }
            }
            let (id, body) = best.unwrap_or((0, Vec3::zeros()));
            let depth = iso[id];
            let rgb = if depth.is_finite() {
                let obj = &world.objects[id];
                let n_body = obj.shape.normal(&body);
                let n_world = placements[id].pose.rotate(&n_body);
                let lambert = n_world.dot(&world.light).max(0.0);
                let shade = world.ambient + (1.0 - world.ambient) * lambert;
                obj.albedo(&body).map(|a| (a * shade).clamp(0.0, 1.0))
            } else {
                [0.0; 3]
            };
            (rgb, depth, id, iso, body)
        })
        .collect();
    let mut out = TraceOutput {
        width: intrinsics.width,
        height: intrinsics.height,
        rgb: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        mask: Vec::with_capacity(n),
        isolated: vec![Vec::with_capacity(n); k],
        body_hit: Vec::with_capacity(n),
    };
    for (rgb, depth, id, iso, body) in per_pixel {
        out.rgb.push(rgb);
        out.depth.push(depth);
        out.mask.push(id);
        for (j, t) in iso.into_iter().enumerate() {
            out.isolated[j].push(t);
        }
        out.body_hit.push(body);
    }
    out
}

/// Traces training frame `n`.
pub fn raytrace_frame(world: &World, n: usize) -> TraceOutput {
    let placements: Vec<Placement> = world
        .objects
        .iter()
        .map(|o| Placement::rigid(o.trajectory[n].clone()))
        .collect();
    raytrace_view(world, &placements, &world.cameras[n], &world.intrinsics)
}

fn room(rng: &mut ChaCha8Rng, frames: usize) -> WorldObject {
    let px = rng.random_range(-0.3..0.3);
    let pillar = Shape::Box {
        center: Vec3::new(px, 0.0, 0.3),
        half: Vec3::new(rng.random_range(0.28..0.38), ROOM_HALF[1], 0.06),
    };
    WorldObject {
        name: "room".into(),
        shape: Shape::Union(vec![
            Shape::Room {
                half: Vec3::from(ROOM_HALF),
            },
            pillar,
        ]),
        color: [0.85, 0.8, 0.7],
        checker: 0.5,
        trajectory: vec![Pose::identity(); frames],
        true_size: 1.0,
    }
}

fn mover(rng: &mut ChaCha8Rng, slot: usize, frames: usize) -> WorldObject {
    // Thin camera-facing slabs spinning about the depth axis.
    let half = Vec3::new(
        rng.random_range(0.45..0.6),
        rng.random_range(0.4..0.55),
        rng.random_range(0.04..0.07),
    );
    let z = 1.6 + 0.9 * slot as f64 + rng.random_range(0.0..0.3);
    let y = rng.random_range(-0.7..0.5) - 0.3 * slot as f64;
    let span = rng.random_range(1.3..1.8);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let x_off = rng.random_range(-0.2..0.2);
    let theta0 = rng.random_range(-0.3..0.3);
    let omega = rng.random_range(-0.8..0.8);
    let trajectory = (0..frames)
        .map(|n| {
            let a = n as f64 / (frames - 1).max(1) as f64;
            let x = x_off + sign * span * (2.0 * a - 1.0);
            Pose::from_axis_angle(Vec3::z(), theta0 + omega * a, Vec3::new(x, y, z))
        })
        .collect();
    let palette = [[0.85, 0.25, 0.2], [0.2, 0.45, 0.85], [0.25, 0.75, 0.3], [0.8, 0.7, 0.15]];
    WorldObject {
        name: format!("mover{slot}"),
        shape: Shape::Box {
            center: Vec3::zeros(),
            half,
        },
        color: palette[slot % palette.len()],
        checker: 0.2,
        trajectory,
        true_size: 2.0 * half.max(),
    }
}

/// A lateral dolly at constant depth that keeps panning towards a fixed target.
fn cameras(rng: &mut ChaCha8Rng, frames: usize) -> Vec<Pose> {
    let target = Vec3::new(0.0, -0.1, 2.0);
    let z = -rng.random_range(2.4..2.8);
    let x0 = rng.random_range(-0.15..0.15);
    let sweep = rng.random_range(2.0..2.6);
    (0..frames)
        .map(|n| {
            let a = n as f64 / (frames - 1).max(1) as f64 - 0.5;
            let eye = Vec3::new(x0 + sweep * a, 0.35 + 0.2 * a, z);
            Pose::look_at(eye, target, Vec3::y())
        })
        .collect()
}

fn build_world(params: &SceneParams, seed: u64) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = vec![room(&mut rng, params.frames)];
    for slot in 0..params.objects.saturating_sub(1) {
        objects.push(mover(&mut rng, slot, params.frames));
    }
    World {
        objects,
        cameras: cameras(&mut rng, params.frames),
        intrinsics: Intrinsics::from_fov(params.width, params.height, params.fov_deg),
        light: Vec3::new(0.35, 0.8, -0.5).normalize(),
        ambient: 0.45,
    }
}

/// Frames in which some mover is visible but partly hidden by another object.
pub fn occlusion_frames(traces: &[TraceOutput]) -> Vec<usize> {
    traces
        .iter()
        .enumerate()
        .filter(|(_, tr)| {
            (1..tr.isolated.len()).any(|k| {
                let footprint = tr.isolated[k].iter().filter(|t| t.is_finite()).count();
                let visible = tr.mask.iter().filter(|&&m| m == k).count();
                visible > 0 && visible < footprint
            })
        })
        .map(|(n, _)| n)
        .collect()
}

fn acceptable(world: &World, traces: &[TraceOutput]) -> bool {
    let k = world.num_objects();
    if traces.iter().any(|tr| tr.depth.iter().any(|d| !d.is_finite())) {
        return false;
    }
    // Every object visible somewhere, and no mover reaching as deep as the room.
    let max_depth = |j: usize| {
        traces
            .iter()
            .flat_map(|tr| tr.depth.iter().zip(&tr.mask).filter(move |(_, &m)| m == j).map(|(d, _)| *d))
            .fold(0.0f64, f64::max)
    };
    let room_far = max_depth(0);
    for j in 1..k {
        let far = max_depth(j);
        if far == 0.0 || far >= 0.9 * room_far {
            return false;
        }
    }
    k < 2 || !occlusion_frames(traces).is_empty()
}

/// Builds a room with `objects - 1` movers and a camera arc, retrying new
/// layouts until every mover is visible and at least one frame shows an
/// inter-object occlusion.
pub fn generate_scene(params: &SceneParams) -> Result<(World, Vec<TraceOutput>)> {
    if params.objects < 1 || params.frames < 2 || params.width < 2 || params.height < 2 {
        return Err(Error::InvalidInput(
            "scene needs at least one object, two frames and a 2x2 image".into(),
        ));
    }
    if params.objects > 255 {
        return Err(Error::InvalidInput("at most 255 objects fit in a u8 mask".into()));
    }
    for attempt in 0..params.max_retries.max(1) {
        let seed = params.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(attempt as u64);
        let world = build_world(params, seed);
        let traces: Vec<TraceOutput> = (0..params.frames).map(|n| raytrace_frame(&world, n)).collect();
        if acceptable(&world, &traces) {
            return Ok((world, traces));
        }
        log::debug!("scene seed {} attempt {attempt} rejected", params.seed);
    }
    Err(Error::RetryBudget(params.max_retries))
}
