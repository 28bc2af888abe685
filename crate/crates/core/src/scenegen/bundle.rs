use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::world::{TraceOutput, World};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, ScaleBounds};

pub const FORMAT_VERSION: u32 = 1;

/// Padding applied to depth extrema when deriving near/far bounds.
pub const BOUND_PAD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub num_objects: usize,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub bounds: ScaleBounds,
    pub files: Vec<String>,
}

/// Per-object training data for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub manifest: Manifest,
    pub frames: Vec<RgbImage>,
    /// 0-based object index per pixel (stored 1-based on disk).
    pub masks: Vec<Vec<u8>>,
    /// `[object][frame]` camera-to-object poses in emitted units.
    pub poses: Vec<Vec<Pose>>,
    /// `[object][frame][pixel]` emitted depth, 0 off the object's mask.
    pub depths: Vec<Vec<Vec<f32>>>,
}

/// Ground truth withheld from training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtSidecar {
    /// Hidden per-object gauge; emitted lengths are metric lengths divided by it.
    pub lambda: Vec<f64>,
    pub world: World,
    /// `[object][frame][pixel]` emitted depth of each object traced alone, 0 on a miss.
    #[serde(skip)]
    pub isolated: Vec<Vec<Vec<f32>>>,
}

impl SceneBundle {
    pub fn num_objects(&self) -> usize {
        self.manifest.num_objects
    }

    pub fn num_frames(&self) -> usize {
        self.manifest.num_frames
    }

    pub fn num_pixels(&self) -> usize {
        self.manifest.width * self.manifest.height
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.manifest.intrinsics
    }

    pub fn bounds(&self) -> &ScaleBounds {
        &self.manifest.bounds
    }

    /// Pixel color in `[0, 1]`.
    pub fn color(&self, frame: usize, pixel: usize) -> [f64; 3] {
        let w = self.manifest.width;
        let p = self.frames[frame].get_pixel((pixel % w) as u32, (pixel / w) as u32);
        p.0.map(|v| v as f64 / 255.0)
    }

    /// Mask pixel count per object summed over frames.
    pub fn mask_areas(&self) -> Vec<usize> {
        let mut area = vec![0; self.num_objects()];
        for m in &self.masks {
            for &id in m {
                area[id as usize] += 1;
            }
        }
        area
    }

    pub fn pose(&self, object: usize, frame: usize) -> Result<&Pose> {
        self.poses
            .get(object)
            .and_then(|p| p.get(frame))
            .ok_or(Error::MissingFrame {
                frame,
                frames: self.num_frames(),
            })
    }

    /// The bundle with objects reordered: new index `i` is old index `order[i]`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        let mut inv = vec![0u8; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inv[old] = new as u8;
        }
        let mut manifest = self.manifest.clone();
        manifest.bounds = ScaleBounds {
            near_obj: order.iter().map(|&k| self.manifest.bounds.near_obj[k]).collect(),
            far_obj: order.iter().map(|&k| self.manifest.bounds.far_obj[k]).collect(),
            ..self.manifest.bounds.clone()
        };
        Self {
            manifest,
            frames: self.frames.clone(),
            masks: self.masks.iter().map(|m| m.iter().map(|&id| inv[id as usize]).collect()).collect(),
            poses: order.iter().map(|&k| self.poses[k].clone()).collect(),
            depths: order.iter().map(|&k| self.depths[k].clone()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        m.bounds.validate()?;
        let k = m.num_objects;
        let px = m.width * m.height;
        let bad = |msg: &str| Error::InvalidInput(format!("inconsistent scene bundle: {msg}"));
        if m.bounds.num_objects() != k || self.poses.len() != k || self.depths.len() != k {
            return Err(bad("object count"));
        }
        if self.frames.len() != m.num_frames || self.masks.len() != m.num_frames {
            return Err(bad("frame count"));
        }
        if self.masks.iter().any(|mk| mk.len() != px || mk.iter().any(|&id| id as usize >= k)) {
            return Err(bad("mask size or id"));
        }
        if self.poses.iter().any(|p| p.len() != m.num_frames) {
            return Err(bad("pose track length"));
        }
        if self.depths.iter().any(|d| d.len() != m.num_frames || d.iter().any(|r| r.len() != px)) {
            return Err(bad("depth raster size"));
        }
        Ok(())
    }
}

impl GtSidecar {
    /// Objects permuted to match `SceneBundle::reordered(order)`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        let mut world = self.world.clone();
        world.objects = order.iter().map(|&k| self.world.objects[k].clone()).collect();
        Self {
            lambda: order.iter().map(|&k| self.lambda[k]).collect(),
            world,
            isolated: order.iter().map(|&k| self.isolated[k].clone()).collect(),
        }
    }
}

fn extrema(depths: &[Vec<f32>]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for &d in depths.iter().flatten() {
        if d > 0.0 {
            lo = lo.min(d as f64);
            hi = hi.max(d as f64);
        }
    }
    (lo, hi)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Converts ray-traced frames into per-object up-to-scale data under the
/// hidden gauge `lambda` (anchor entry 1).
pub fn emit_bundle(world: &World, traces: &[TraceOutput], lambda: &[f64]) -> Result<(SceneBundle, GtSidecar)> {
    let k = world.num_objects();
    if lambda.len() != k || lambda.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::Domain("gauge needs one positive factor per object".into()));
    }
    let intr = world.intrinsics;
    let frames: Vec<RgbImage> = traces
        .iter()
        .map(|tr| {
            RgbImage::from_fn(intr.width as u32, intr.height as u32, |x, y| {
                let c = tr.rgb[y as usize * intr.width + x as usize];
                image::Rgb(c.map(quantize))
            })
        })
        .collect();
    let masks: Vec<Vec<u8>> = traces.iter().map(|tr| tr.mask.iter().map(|&m| m as u8).collect()).collect();
    let poses: Vec<Vec<Pose>> = (0..k)
        .map(|j| {
            world
                .cameras
                .iter()
                .zip(&world.objects[j].trajectory)
                .map(|(cam, obj)| {
                    let b = obj.inverse().compose(cam);
                    Pose {
                        rotation: b.rotation,
                        translation: b.translation / lambda[j],
                    }
                })
                .collect()
        })
        .collect();
    let depths: Vec<Vec<Vec<f32>>> = (0..k)
        .map(|j| {
            traces
                .iter()
                .map(|tr| {
                    tr.depth
                        .iter()
                        .zip(&tr.mask)
                        .map(|(&d, &m)| if m == j { (d / lambda[j]) as f32 } else { 0.0 })
                        .collect()
                })
                .collect()
        })
        .collect();
    let isolated: Vec<Vec<Vec<f32>>> = (0..k)
        .map(|j| {
            traces
                .iter()
                .map(|tr| {
                    tr.isolated[j]
                        .iter()
                        .map(|&d| if d.is_finite() { (d / lambda[j]) as f32 } else { 0.0 })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut near_obj = Vec::with_capacity(k);
    let mut far_obj = Vec::with_capacity(k);
    for (j, d) in depths.iter().enumerate() {
        let (lo, hi) = extrema(d);
        if !lo.is_finite() {
            return Err(Error::EmptyObject(j));
        }
        near_obj.push((1.0 - BOUND_PAD) * lo);
        far_obj.push((1.0 + BOUND_PAD) * hi);
    }
    let far_scene = far_obj.iter().cloned().fold(0.0, f64::max);
    // The anchor's multiplier is far_scene / far_obj[0]; lower the scene near
    // bound until every object's true multiplier lies inside its range.
    let anchor = far_scene / far_obj[0];
    let mut near_scene = near_obj.iter().cloned().fold(f64::INFINITY, f64::min);
    for j in 0..k {
        near_scene = near_scene.min(anchor * lambda[j] / lambda[0] * near_obj[j]);
    }
    let near_scene = 0.95 * near_scene;
    let bounds = ScaleBounds {
        near_obj,
        far_obj,
        near_scene,
        far_scene,
    };
    bounds.validate()?;
    let mut files = Vec::new();
    for n in 0..traces.len() {
        files.push(format!("frames/{n:04}.png"));
        files.push(format!("masks/{n:04}.u8"));
    }
    for j in 0..k {
        files.push(format!("poses/obj{:02}.f32", j + 1));
        for n in 0..traces.len() {
            files.push(format!("depths/obj{:02}_{n:04}.f32", j + 1));
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        num_objects: k,
        num_frames: traces.len(),
        width: intr.width,
        height: intr.height,
        intrinsics: intr,
        bounds,
        files,
    };
    let bundle = SceneBundle {
        manifest,
        frames,
        masks,
        poses,
        depths,
    };
    let gt = GtSidecar {
        lambda: lambda.to_vec(),
        world: world.clone(),
        isolated,
    };
    Ok((bundle, gt))
}

/// Denormalized multipliers that reproduce the true scene: the anchor's
/// multiplier times each object's gauge ratio.
pub fn true_multipliers(bounds: &ScaleBounds, lambda: &[f64]) -> Vec<f64> {
    let anchor = bounds.far_scene / bounds.far_obj[0];
    lambda.iter().map(|l| anchor * l / lambda[0]).collect()
}

/// Normalized free scales of the true gauge.
pub fn true_free_scales(bounds: &ScaleBounds, lambda: &[f64]) -> Vec<f64> {
    true_multipliers(bounds, lambda)
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, &m)| bounds.normalize(k, m))
        .collect()
}

fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    for sub in ["frames", "masks", "poses", "depths"] {
        mkdir(&dir.join(sub))?;
    }
    let manifest = serde_json::to_string_pretty(&bundle.manifest)?;
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    for (n, frame) in bundle.frames.iter().enumerate() {
        let p = dir.join(format!("frames/{n:04}.png"));
        frame.save(&p).map_err(|e| Error::Image(format!("{}: {e}", p.display())))?;
        let p = dir.join(format!("masks/{n:04}.u8"));
        let ids: Vec<u8> = bundle.masks[n].iter().map(|&m| m + 1).collect();
        fs::write(&p, ids).map_err(|e| Error::io(&p, e))?;
    }
    for k in 0..bundle.num_objects() {
        let flat: Vec<f32> = bundle.poses[k].iter().flat_map(|p| p.to_row_major()).collect();
        write_f32(&dir.join(format!("poses/obj{:02}.f32", k + 1)), &flat)?;
        for (n, raster) in bundle.depths[k].iter().enumerate() {
            write_f32(&dir.join(format!("depths/obj{:02}_{n:04}.f32", k + 1)), raster)?;
        }
    }
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<SceneBundle> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &mpath,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    let (w, h) = (manifest.width, manifest.height);
    let px = w * h;
    let mut frames = Vec::with_capacity(manifest.num_frames);
    let mut masks = Vec::with_capacity(manifest.num_frames);
    for n in 0..manifest.num_frames {
        let p = dir.join(format!("frames/{n:04}.png"));
        let img = image::open(&p)
            .map_err(|e| Error::format(&p, e.to_string()))?
            .to_rgb8();
        if img.width() as usize != w || img.height() as usize != h {
            return Err(Error::format(&p, "frame size differs from manifest"));
        }
        frames.push(img);
        let p = dir.join(format!("masks/{n:04}.u8"));
        let ids = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if ids.len() != px || ids.iter().any(|&id| id == 0 || id as usize > manifest.num_objects) {
            return Err(Error::format(&p, "mask size or object id out of range"));
        }
        masks.push(ids.into_iter().map(|id| id - 1).collect());
    }
    let mut poses = Vec::new();
    let mut depths = Vec::new();
    for k in 0..manifest.num_objects {
        let p = dir.join(format!("poses/obj{:02}.f32", k + 1));
        let flat = read_f32(&p, manifest.num_frames * 12)?;
        poses.push(
            flat.chunks_exact(12)
                .map(Pose::from_row_major)
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::format(&p, e.to_string()))?,
        );
        let mut rasters = Vec::new();
        for n in 0..manifest.num_frames {
            rasters.push(read_f32(&dir.join(format!("depths/obj{:02}_{n:04}.f32", k + 1)), px)?);
        }
        depths.push(rasters);
    }
    let bundle = SceneBundle {
        manifest,
        frames,
        masks,
        poses,
        depths,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_gt(gt: &GtSidecar, dir: &Path) -> Result<()> {
    let gdir = dir.join("gt");
    mkdir(&gdir)?;
    let p = gdir.join("gauge.json");
    fs::write(&p, serde_json::to_string_pretty(&serde_json::json!({ "lambda": gt.lambda }))?)
        .map_err(|e| Error::io(&p, e))?;
    let p = gdir.join("world.json");
    fs::write(&p, serde_json::to_string(&gt.world)?).map_err(|e| Error::io(&p, e))?;
    for (k, rasters) in gt.isolated.iter().enumerate() {
        for (n, r) in rasters.iter().enumerate() {
            write_f32(&gdir.join(format!("isolated_obj{:02}_{n:04}.f32", k + 1)), r)?;
        }
    }
    Ok(())
}

pub fn load_gt(dir: &Path, manifest: &Manifest) -> Result<GtSidecar> {
    let gdir = dir.join("gt");
    let p = gdir.join("gauge.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    #[derive(Deserialize)]
    struct Gauge {
        lambda: Vec<f64>,
    }
    let gauge: Gauge = serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?;
    let p = gdir.join("world.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let world: World = serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?;
    let px = manifest.width * manifest.height;
    let mut isolated = Vec::new();
    for k in 0..manifest.num_objects {
        let mut rasters = Vec::new();
        for n in 0..manifest.num_frames {
            rasters.push(read_f32(&gdir.join(format!("isolated_obj{:02}_{n:04}.f32", k + 1)), px)?);
        }
        isolated.push(rasters);
    }
    Ok(GtSidecar {
        lambda: gauge.lambda,
        world,
        isolated,
    })
}
