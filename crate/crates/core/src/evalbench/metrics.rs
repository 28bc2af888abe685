use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Row-major image with interleaved channels and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Dimension {
                what: "image data",
                expected: width * height * channels,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_rgb(width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<Self> {
        Self::new(width, height, 3, rgb.iter().flatten().copied().collect())
    }

    pub fn constant(width: usize, height: usize, channels: usize, v: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
        }
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(Error::InvalidInput(format!(
                "image shapes differ: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }
}

fn check_mask(mask: Option<&[bool]>, pixels: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != pixels => Err(Error::Dimension {
            what: "pixel mask",
            expected: pixels,
            got: m.len(),
        }),
        _ => Ok(()),
    }
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(pred: &ImageBuf, gt: &ImageBuf) -> Result<f64> {
    psnr_masked(pred, gt, None)
}

/// PSNR over the pixels where `mask` is true (all pixels when `None`).
pub fn psnr_masked(pred: &ImageBuf, gt: &ImageBuf, mask: Option<&[bool]>) -> Result<f64> {
    pred.same_shape(gt)?;
    check_mask(mask, pred.width * pred.height)?;
    let c = pred.channels;
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, (a, b)) in pred.data.chunks(c).zip(gt.data.chunks(c)).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            count += c;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no pixels to compare".into()));
    }
    Ok(psnr_from_mse(sum / count as f64))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode Gaussian filter of one channel.
fn filter(plane: &[f64], width: usize, height: usize, win: &[f64]) -> Vec<f64> {
    let n = win.len();
    let (ow, oh) = (width - n + 1, height - n + 1);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| win[i] * plane[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Per-window SSIM of each channel, averaged over channels. The map covers
/// the `(width − 10) × (height − 10)` window centers.
pub fn ssim_map(pred: &ImageBuf, gt: &ImageBuf) -> Result<Vec<f64>> {
    pred.same_shape(gt)?;
    if pred.width < SSIM_WINDOW || pred.height < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            pred.width, pred.height
        )));
    }
    let (w, h, c) = (pred.width, pred.height, pred.channels);
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut acc = vec![0.0; (w - SSIM_WINDOW + 1) * (h - SSIM_WINDOW + 1)];
    for ch in 0..c {
        let x: Vec<f64> = pred.data.iter().skip(ch).step_by(c).copied().collect();
        let y: Vec<f64> = gt.data.iter().skip(ch).step_by(c).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = filter(&x, w, h, &win);
        let my = filter(&y, w, h, &win);
        let sxx = filter(&xx, w, h, &win);
        let syy = filter(&yy, w, h, &win);
        let sxy = filter(&xy, w, h, &win);
        for i in 0..acc.len() {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
            acc[i] += num / den / c as f64;
        }
    }
    Ok(acc)
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03,
/// dynamic range 1, averaged over channels.
pub fn ssim(pred: &ImageBuf, gt: &ImageBuf) -> Result<f64> {
    ssim_masked(pred, gt, None)
}

/// Mean SSIM over windows whose center pixel is in `mask`.
pub fn ssim_masked(pred: &ImageBuf, gt: &ImageBuf, mask: Option<&[bool]>) -> Result<f64> {
    check_mask(mask, pred.width * pred.height)?;
    let map = ssim_map(pred, gt)?;
    let half = SSIM_WINDOW / 2;
    let ow = pred.width - SSIM_WINDOW + 1;
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, v) in map.iter().enumerate() {
        let (y, x) = (i / ow + half, i % ow + half);
        if mask.is_none_or(|m| m[y * pred.width + x]) {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no SSIM windows inside the mask".into()));
    }
    Ok(sum / count as f64)
}

/// Mean absolute error after the least-squares affine fit of `pred` to
/// `gt` over `valid`. A constant prediction is fit by offset only.
pub fn ssimae(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || valid.len() != gt.len() {
        return Err(Error::Dimension {
            what: "depth maps",
            expected: gt.len(),
            got: pred.len().min(valid.len()),
        });
    }
    let idx: Vec<usize> = (0..gt.len())
        .filter(|&i| valid[i] && pred[i].is_finite() && gt[i].is_finite())
        .collect();
    if idx.len() < 2 {
        return Err(Error::InvalidInput("SSIMAE needs at least two valid pixels".into()));
    }
    let n = idx.len() as f64;
    let mp = idx.iter().map(|&i| pred[i]).sum::<f64>() / n;
    let mg = idx.iter().map(|&i| gt[i]).sum::<f64>() / n;
    let vp = idx.iter().map(|&i| (pred[i] - mp).powi(2)).sum::<f64>();
    let cov = idx.iter().map(|&i| (pred[i] - mp) * (gt[i] - mg)).sum::<f64>();
    let scale_floor = 1e-12 * idx.iter().map(|&i| pred[i] * pred[i]).sum::<f64>().max(1e-300);
    let (a, b) = if vp <= scale_floor { (0.0, mg) } else { (cov / vp, mg - cov / vp * mp) };
    Ok(idx.iter().map(|&i| (a * pred[i] + b - gt[i]).abs()).sum::<f64>() / n)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    /// Mean IoU over objects present in the prediction or the ground truth.
    pub miou: f64,
    /// Panoptic quality in percent.
    pub pq: f64,
}

/// mIoU and PQ with each object id one segment; a predicted and a true
/// segment match when their IoU exceeds 0.5. Pixels outside `valid` are
/// ignored.
pub fn seg_metrics(pred: &[usize], gt: &[usize], k: usize, valid: Option<&[bool]>) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension {
            what: "label maps",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    check_mask(valid, gt.len())?;
    let mut inter = vec![0usize; k];
    let mut area_p = vec![0usize; k];
    let mut area_g = vec![0usize; k];
    for i in 0..gt.len() {
        if valid.is_some_and(|m| !m[i]) {
            continue;
        }
        let (p, g) = (pred[i], gt[i]);
        if p >= k || g >= k {
            return Err(Error::InvalidInput(format!("label out of range for {k} objects")));
        }
        area_p[p] += 1;
        area_g[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let (mut iou_sum, mut present) = (0.0, 0usize);
    let (mut tp_iou, mut tp, mut fp, mut fn_) = (0.0, 0usize, 0usize, 0usize);
    for j in 0..k {
        let union = area_p[j] + area_g[j] - inter[j];
        if union == 0 {
            continue;
        }
        let iou = inter[j] as f64 / union as f64;
        iou_sum += iou;
        present += 1;
        if iou > 0.5 {
            tp += 1;
            tp_iou += iou;
        } else {
            fp += usize::from(area_p[j] > 0);
            fn_ += usize::from(area_g[j] > 0);
        }
    }
    let miou = if present == 0 { 1.0 } else { iou_sum / present as f64 };
    let denom = tp as f64 + 0.5 * (fp + fn_) as f64;
    let pq = if denom == 0.0 { 100.0 } else { 100.0 * tp_iou / denom };
    Ok(SegMetrics { miou, pq })
}

/// Mean squared difference of the non-anchor scales. Both inputs are
/// multipliers relative to the same anchor value at index 0.
pub fn scale_mse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Dimension {
            what: "scale vectors",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if (pred[0] - gt[0]).abs() > 1e-9 * gt[0].abs().max(1.0) {
        return Err(Error::InvalidInput(format!(
            "anchor scales differ: {} vs {}",
            pred[0], gt[0]
        )));
    }
    if pred.len() == 1 {
        return Ok(0.0);
    }
    Ok(pred[1..].iter().zip(&gt[1..]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (pred.len() - 1) as f64)
}

/// Area under the ROC curve (Mann–Whitney statistic, ties counted half).
/// `None` when only one class is present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len().min(labels.len())).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = order.iter().filter(|&&i| labels[i]).count();
    let neg = order.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Average ranks over tied groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&t| labels[t]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}
