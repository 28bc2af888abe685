use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::composite_render_rays;
use crate::error::{Error, Result};
use crate::geometry::{pixel_to_ray, Intrinsics, Pose, ScaleCombination};
use crate::objectfield::{RenderConfig, VmField};
use crate::real::Real;

const ROWS_PER_TASK: usize = 4;

/// A rendered image with per-pixel depth and hard object labels, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    pub labels: Vec<usize>,
}

impl RenderedView {
    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let c = self.rgb[y as usize * self.width + x as usize];
            Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_image().write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(buf.into_inner())
    }
}

/// Camera-to-object pose of a view relative to the camera of frame `frame`,
/// given as a camera-to-camera offset `delta` (expressed in the metric of
/// object `owner`).
pub fn offset_view(frame_pose: &Pose, delta: &Pose) -> Pose {
    frame_pose.compose(delta)
}

/// Renders a full image: rays are cast from `camera` (camera-to-`owner`
/// pose) and composited with every object placed as in `poses`, the
/// objects' poses at one frame.
pub fn render_view<T: Real>(
    fields: &[VmField<T>],
    poses: &[Pose],
    owner: usize,
    camera: &Pose,
    intrinsics: &Intrinsics,
    scales: &ScaleCombination,
    cfg: &RenderConfig,
) -> Result<RenderedView> {
    if owner >= fields.len() {
        return Err(Error::Dimension {
            what: "view owner",
            expected: fields.len(),
            got: owner,
        });
    }
    let (w, h) = (intrinsics.width, intrinsics.height);
    let tracks: Vec<Vec<Pose>> = poses.iter().map(|p| vec![p.clone()]).collect();
    let chunks: Vec<Result<Vec<_>>> = (0..h.div_ceil(ROWS_PER_TASK))
        .into_par_iter()
        .map(|c| {
            let rows = c * ROWS_PER_TASK..((c + 1) * ROWS_PER_TASK).min(h);
            let mut rays = Vec::with_capacity(rows.len() * w);
            for row in rows {
                for col in 0..w {
                    let mut r = pixel_to_ray((row, col), intrinsics, camera)?;
                    r.owner = owner;
                    r.frame = 0;
                    rays.push(r);
                }
            }
            let (out, _) = composite_render_rays(fields, &tracks, &rays, scales, cfg, None)?;
            Ok(out)
        })
        .collect();
    let mut view = RenderedView {
        width: w,
        height: h,
        rgb: Vec::with_capacity(w * h),
        depth: Vec::with_capacity(w * h),
        opacity: Vec::with_capacity(w * h),
        labels: Vec::with_capacity(w * h),
    };
    for chunk in chunks {
        for o in chunk? {
            view.rgb.push(o.color.map(|v| v.to_f64_lossy()));
            view.depth.push(o.depth.to_f64_lossy());
            view.opacity.push(o.opacity.to_f64_lossy());
            view.labels.push(o.label());
        }
    }
    Ok(view)
}
