use serde::{Deserialize, Serialize};

use super::render::{CompositeGrad, RenderOutput};
use crate::error::{Error, Result};
use crate::geometry::ScaleCombination;
use crate::objectfield::{RayGrad, RayRender};
use crate::real::Real;

/// Segmentation probabilities are clipped to this before the log.
pub const SEG_CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub seg: f64,
}

/// Batch-averaged loss terms, unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneLosses {
    pub rgb: f64,
    pub depth: f64,
    pub seg: f64,
}

impl SceneLosses {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.rgb * self.rgb + w.depth * self.depth + w.seg * self.seg
    }
}

/// Ground truth for one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelTarget {
    pub color: [f64; 3],
    /// The owner object's up-to-scale depth; non-positive when absent.
    pub depth: f64,
    pub object: usize,
}

fn rgb_term<T: Real>(c: &[T; 3], gt: &[f64; 3]) -> (f64, [f64; 3]) {
    let diff = [0, 1, 2].map(|ch| c[ch].to_f64_lossy() - gt[ch]);
    let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    let grad = if norm > 0.0 { diff.map(|d| d / norm) } else { [0.0; 3] };
    (norm, grad)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scene-level RGB, depth and segmentation losses averaged over the batch,
/// and per-ray gradients of `w · losses`. Depth targets are scaled by the
/// owner's multiplier; the segmentation term is cross-entropy against the
/// one-hot owner.
pub fn scene_losses<T: Real>(
    pred: &[RenderOutput<T>],
    targets: &[PixelTarget],
    scales: &ScaleCombination,
    weights: &LossWeights,
) -> Result<(SceneLosses, Vec<CompositeGrad<T>>)> {
    if pred.len() != targets.len() {
        return Err(Error::Dimension {
            what: "targets",
            expected: pred.len(),
            got: targets.len(),
        });
    }
    let n = pred.len().max(1) as f64;
    let mut losses = SceneLosses::default();
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(targets) {
        let k = p.segmentation.len();
        if t.object >= k || k != scales.len() {
            return Err(Error::Dimension {
                what: "mask object",
                expected: k,
                got: t.object.max(scales.len()),
            });
        }
        let (l_rgb, g_rgb) = rgb_term(&p.color, &t.color);
        losses.rgb += l_rgb;
        let mut g_depth = 0.0;
        if t.depth > 0.0 {
            let r = p.depth.to_f64_lossy() - scales.denorm[t.object] * t.depth;
            losses.depth += r.abs();
            g_depth = sign(r);
        }
        let o = p.segmentation[t.object].to_f64_lossy();
        let oc = o.clamp(SEG_CLIP, 1.0 - SEG_CLIP);
        losses.seg -= oc.ln();
        let mut g_seg = vec![T::zero(); k];
        if o == oc {
            g_seg[t.object] = T::lit(-weights.seg / (o * n));
        }
        grads.push(CompositeGrad {
            color: g_rgb.map(|g| T::lit(weights.rgb * g / n)),
            depth: T::lit(weights.depth * g_depth / n),
            opacity: T::zero(),
            segmentation: g_seg,
        });
    }
    losses.rgb /= n;
    losses.depth /= n;
    losses.seg /= n;
    Ok((losses, grads))
}

/// Per-object RGB and depth losses of independent renders, batch-averaged,
/// with per-ray gradients of `w_rgb·rgb + w_depth·depth`.
pub fn object_losses<T: Real>(
    pred: &[RayRender<T>],
    targets: &[PixelTarget],
    w_rgb: f64,
    w_depth: f64,
) -> Result<(SceneLosses, Vec<RayGrad<T>>)> {
    if pred.len() != targets.len() {
        return Err(Error::Dimension {
            what: "targets",
            expected: pred.len(),
            got: targets.len(),
        });
    }
    let n = pred.len().max(1) as f64;
    let mut losses = SceneLosses::default();
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(targets) {
        let (l_rgb, g_rgb) = rgb_term(&p.color, &t.color);
        losses.rgb += l_rgb;
        let mut g_depth = 0.0;
        if t.depth > 0.0 {
            let r = p.depth.to_f64_lossy() - t.depth;
            losses.depth += r.abs();
            g_depth = sign(r);
        }
        grads.push(RayGrad {
            color: g_rgb.map(|g| T::lit(w_rgb * g / n)),
            depth: T::lit(w_depth * g_depth / n),
            opacity: T::zero(),
        });
    }
    losses.rgb /= n;
    losses.depth /= n;
    Ok((losses, grads))
}
