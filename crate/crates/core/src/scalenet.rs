//! The object scale network: a validity classifier over normalized scale
//! combinations, its BCE training step and rejection sampling.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ScaleBounds, ScaleCombination};
use crate::nn::{Adam, AdamConfig, Mlp};
use crate::real::sigmoid;

pub const HIDDEN_LAYERS: usize = 4;
pub const HIDDEN_WIDTH: usize = 64;
/// Scores are clipped to `[BCE_CLIP, 1 - BCE_CLIP]` inside the loss.
pub const BCE_CLIP: f64 = 1e-7;

/// Maps the free scales `[s_2, .., s_K]` to a validity score.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleMlp {
    pub net: Mlp<f64>,
}

impl ScaleMlp {
    /// He-initialized hidden layers and a zero output layer, so every
    /// input starts at p = 0.5.
    pub fn new<R: Rng + ?Sized>(num_objects: usize, rng: &mut R) -> Self {
        let mut net = Mlp::new(&Self::widths(num_objects), rng);
        if let Some(last) = net.layers.last_mut() {
            last.weight.fill(0.0);
            last.bias.fill(0.0);
        }
        Self { net }
    }

    pub fn widths(num_objects: usize) -> Vec<usize> {
        let mut w = vec![num_objects.saturating_sub(1)];
        w.extend([HIDDEN_WIDTH; HIDDEN_LAYERS]);
        w.push(1);
        w
    }

    /// A network whose output is the constant `p` for every input.
    pub fn constant(num_objects: usize, p: f64) -> Self {
        let mut net = Mlp::zeros(&Self::widths(num_objects));
        let logit = (p / (1.0 - p)).ln();
        if let Some(last) = net.layers.last_mut() {
            last.bias[0] = logit;
        }
        Self { net }
    }

    pub fn num_objects(&self) -> usize {
        self.net.input_dim() + 1
    }

    pub fn num_free(&self) -> usize {
        self.net.input_dim()
    }

    /// Scores for a batch of free-scale rows.
    pub fn predict_batch(&self, free: ArrayView2<'_, f64>) -> Vec<f64> {
        self.net.forward(free).column(0).iter().map(|&z| sigmoid(z)).collect()
    }

    pub fn predict_free(&self, free: &[f64]) -> Result<f64> {
        if free.len() != self.num_free() {
            return Err(Error::Dimension {
                what: "free scales",
                expected: self.num_free(),
                got: free.len(),
            });
        }
        let x = ArrayView2::from_shape((1, free.len()), free).expect("row shape");
        Ok(self.predict_batch(x)[0])
    }

    pub fn predict_validity(&self, scales: &ScaleCombination) -> Result<f64> {
        if scales.len() != self.num_objects() {
            return Err(Error::Dimension {
                what: "scale combination",
                expected: self.num_objects(),
                got: scales.len(),
            });
        }
        if scales.normalized[0] != 1.0 {
            return Err(Error::Domain("anchor scale must be exactly 1".into()));
        }
        self.predict_free(scales.free())
    }
}

/// Mean binary cross-entropy for fractional labels in `[0, 1]`.
pub fn bce(p: &[f64], labels: &[f64]) -> f64 {
    let n = p.len().max(1) as f64;
    p.iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Loss and parameter gradients of the mean BCE. Labels may be
/// fractional, which equals averaging the BCE over repeated inputs.
pub fn bce_loss_and_grad(net: &ScaleMlp, inputs: &Array2<f64>, labels: &[f64]) -> Result<(f64, Mlp<f64>)> {
    if inputs.nrows() != labels.len() {
        return Err(Error::Dimension {
            what: "labels",
            expected: inputs.nrows(),
            got: labels.len(),
        });
    }
    if inputs.ncols() != net.num_free() {
        return Err(Error::Dimension {
            what: "free scales",
            expected: net.num_free(),
            got: inputs.ncols(),
        });
    }
    if labels.iter().any(|y| !(0.0..=1.0).contains(y)) {
        return Err(Error::Domain("labels must lie in [0, 1]".into()));
    }
    let (z, tape) = net.net.forward_tape(inputs.clone());
    let p: Vec<f64> = z.column(0).iter().map(|&v| sigmoid(v)).collect();
    let loss = bce(&p, labels);
    let n = labels.len().max(1) as f64;
    let dz = Array2::from_shape_fn((labels.len(), 1), |(i, _)| {
        if p[i] < BCE_CLIP || p[i] > 1.0 - BCE_CLIP {
            0.0
        } else {
            (p[i] - labels[i]) / n
        }
    });
    let mut grads = net.net.zeros_like();
    net.net.backward(&tape, dz, &mut grads);
    Ok((loss, grads))
}

/// Adam state for the scale network.
#[derive(Clone, Debug)]
pub struct ScaleTrainer {
    pub adam: Adam<f64>,
}

impl Default for ScaleTrainer {
    fn default() -> Self {
        Self::new(AdamConfig::default())
    }
}

impl ScaleTrainer {
    pub fn new(config: AdamConfig) -> Self {
        Self { adam: Adam::new(config) }
    }

    /// One Adam step on the mean BCE; returns the pre-step loss.
    pub fn train_step_bce(&mut self, net: &mut ScaleMlp, inputs: &Array2<f64>, labels: &[f64]) -> Result<f64> {
        let (loss, grads) = bce_loss_and_grad(net, inputs, labels)?;
        self.adam.step(net.net.tensors_mut(), grads.tensors());
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub validity_threshold: f64,
    pub max_rejection_attempts: usize,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            validity_threshold: 0.95,
            max_rejection_attempts: 100_000,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSample {
    pub scales: ScaleCombination,
    pub score: f64,
    pub attempts: usize,
}

const DRAW_CHUNK: usize = 64;

/// Draws free scales uniformly from `[0, 1)` until the score exceeds the
/// threshold. Candidates are scored in chunks; the first accepted one in
/// draw order is returned.
pub fn sample_valid_combination(
    net: &ScaleMlp,
    bounds: &ScaleBounds,
    threshold: f64,
    max_attempts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ScaleSample> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!("validity threshold {threshold} outside (0, 1)")));
    }
    let k = net.num_free();
    if bounds.num_objects() != k + 1 {
        return Err(Error::Dimension {
            what: "scale bounds",
            expected: k + 1,
            got: bounds.num_objects(),
        });
    }
    let mut attempts = 0;
    while attempts < max_attempts {
        let n = DRAW_CHUNK.min(max_attempts - attempts);
        let draws = Array2::from_shape_simple_fn((n, k), || rng.random::<f64>());
        let scores = net.predict_batch(draws.view());
        if let Some(i) = scores.iter().position(|&p| p > threshold) {
            let scales = ScaleCombination::from_free(draws.row(i).as_slice().expect("row"), bounds)?;
            return Ok(ScaleSample {
                scales,
                score: scores[i],
                attempts: attempts + i + 1,
            });
        }
        attempts += n;
    }
    Err(Error::SamplerStarvation { attempts, threshold })
}

/// Draws `count` accepted samples with a sampler seeded from `cfg`.
pub fn sample_many(net: &ScaleMlp, bounds: &ScaleBounds, cfg: &SamplerConfig, count: usize) -> Result<Vec<ScaleSample>> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    (0..count)
        .map(|_| sample_valid_combination(net, bounds, cfg.validity_threshold, cfg.max_rejection_attempts, &mut rng))
        .collect()
}

/// Scores on a regular grid over one or two free axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    pub resolution: usize,
    /// Free-axis indices (0 is `s_2`).
    pub axes: Vec<usize>,
    /// Values of all free scales; scanned axes are overwritten.
    pub fixed: Vec<f64>,
    /// Row-major, first axis slowest.
    pub scores: Vec<f64>,
}

impl ScoreGrid {
    pub fn coord(&self, i: usize) -> f64 {
        grid_coord(i, self.resolution)
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        let flat = idx.iter().fold(0, |acc, &i| acc * self.resolution + i);
        self.scores[flat]
    }
}

pub fn grid_coord(i: usize, res: usize) -> f64 {
    i as f64 / (res - 1) as f64
}

/// Free-scale rows of a regular grid over `axes`, other axes taken from `fixed`.
pub fn grid_points(res: usize, axes: &[usize], fixed: &[f64]) -> Result<Array2<f64>> {
    if res < 2 {
        return Err(Error::Domain("grid resolution must be at least 2".into()));
    }
    if axes.is_empty() || axes.len() > 2 {
        return Err(Error::InvalidInput(format!(
            "a scan covers one or two free axes, got {}",
            axes.len()
        )));
    }
    if axes.iter().any(|&a| a >= fixed.len()) || (axes.len() == 2 && axes[0] == axes[1]) {
        return Err(Error::InvalidInput(format!(
            "scan axes {axes:?} invalid for {} free scales",
            fixed.len()
        )));
    }
    let total = res.pow(axes.len() as u32);
    let mut out = Array2::zeros((total, fixed.len()));
    for (n, mut row) in out.outer_iter_mut().enumerate() {
        row.assign(&ndarray::ArrayView1::from(fixed));
        let mut rem = n;
        for &a in axes.iter().rev() {
            row[a] = grid_coord(rem % res, res);
            rem /= res;
        }
    }
    Ok(out)
}

/// Dense evaluation of the network over a one- or two-axis grid.
pub fn scan_valid_region(net: &ScaleMlp, res: usize, axes: &[usize], fixed: &[f64]) -> Result<ScoreGrid> {
    if fixed.len() != net.num_free() {
        return Err(Error::Dimension {
            what: "fixed free scales",
            expected: net.num_free(),
            got: fixed.len(),
        });
    }
    let pts = grid_points(res, axes, fixed)?;
    Ok(ScoreGrid {
        resolution: res,
        axes: axes.to_vec(),
        fixed: fixed.to_vec(),
        scores: net.predict_batch(pts.view()),
    })
}
