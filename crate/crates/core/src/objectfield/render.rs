use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::field::{ColorTape, FieldGrads, Interp, VmField};
use crate::error::{Error, Result};
use crate::geometry::{Ray, Vec3};
use crate::real::Real;

/// Depth reported only when accumulated opacity exceeds this.
pub const OPACITY_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub white_background: bool,
    /// Colors are evaluated only for samples whose weight exceeds this.
    pub weight_threshold: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 64,
            near: 0.1,
            far: 4.0,
            white_background: false,
            weight_threshold: 1e-4,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(Error::Domain("samples_per_ray must be at least 2".into()));
        }
        if !(self.near.is_finite() && self.far.is_finite() && self.near < self.far) {
            return Err(Error::Domain(format!("invalid near/far ({}, {})", self.near, self.far)));
        }
        if !(self.weight_threshold >= 0.0) {
            return Err(Error::Domain("weight_threshold must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_range(&self, near: f64, far: f64) -> Self {
        Self {
            near,
            far,
            ..self.clone()
        }
    }

    pub fn background<T: Real>(&self) -> T {
        if self.white_background {
            T::one()
        } else {
            T::zero()
        }
    }
}

/// Stratified sample distances in `[near, far]` and the bin width.
/// Without jitter every sample sits at its bin center.
pub fn sample_distances(near: f64, far: f64, m: usize, jitter: Option<&mut ChaCha8Rng>) -> (Vec<f64>, f64) {
    let delta = (far - near) / m as f64;
    let t = match jitter {
        Some(rng) => (0..m)
            .map(|i| near + (i as f64 + rng.random::<f64>()) * delta)
            .collect(),
        None => (0..m).map(|i| near + (i as f64 + 0.5) * delta).collect(),
    };
    (t, delta)
}

/// Emission-absorption weights `w_i = T_i (1 - e^{-σ_i δ})` and the
/// transmittance after each sample.
pub fn compute_weights<T: Real>(sigma: &[T], delta: T) -> (Vec<T>, Vec<T>) {
    let mut w = Vec::with_capacity(sigma.len());
    let mut after = Vec::with_capacity(sigma.len());
    let mut trans = T::one();
    for &s in sigma {
        let e = (-s * delta).exp();
        w.push(trans * (T::one() - e));
        trans *= e;
        after.push(trans);
    }
    (w, after)
}

/// `dL/dσ` from `dL/dw` for [`compute_weights`].
pub fn weights_backward<T: Real>(weights: &[T], after: &[T], delta: T, g_w: &[T]) -> Vec<T> {
    let n = weights.len();
    let mut out = vec![T::zero(); n];
    let mut tail = T::zero();
    for i in (0..n).rev() {
        out[i] = delta * (g_w[i] * after[i] - tail);
        tail += g_w[i] * weights[i];
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayRender<T> {
    pub color: [T; 3],
    pub depth: T,
    pub opacity: T,
}

/// Loss gradients with respect to one ray's outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayGrad<T> {
    pub color: [T; 3],
    pub depth: T,
    pub opacity: T,
}

#[derive(Debug)]
pub(crate) struct RayTape<T> {
    t: Vec<f64>,
    delta: T,
    interps: Vec<Option<Interp<T>>>,
    raw: Vec<T>,
    weights: Vec<T>,
    after: Vec<T>,
    /// `(sample index, color row)` for samples with a color evaluation.
    selected: Vec<(usize, usize)>,
    out: RayRender<T>,
}

/// Forward record for [`field_backward`].
#[derive(Debug)]
pub struct IndependentTape<T> {
    stamp: u64,
    rays: Vec<RayTape<T>>,
    color: ColorTape<T>,
    colors: Array2<T>,
    background: T,
}

impl<T> IndependentTape<T> {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Density pass of one ray: lookups, pre-activations and weights.
fn density_pass<T: Real>(field: &VmField<T>, ray: &Ray, t: Vec<f64>, delta: f64) -> RayTape<T> {
    let m = t.len();
    field.count_queries(m);
    let mut interps = Vec::with_capacity(m);
    let mut raw = Vec::with_capacity(m);
    let mut sigma = Vec::with_capacity(m);
    for &ti in &t {
        let p = ray.origin + ray.direction * ti;
        let it = field.interp(field.aabb.to_unit(&p));
        let a = it.as_ref().map(|it| field.density_raw(it)).unwrap_or_else(T::zero);
        sigma.push(if it.is_some() { VmField::<T>::activate(a) } else { T::zero() });
        interps.push(it);
        raw.push(a);
    }
    let delta = T::lit(delta);
    let (weights, after) = compute_weights(&sigma, delta);
    RayTape {
        t,
        delta,
        interps,
        raw,
        weights,
        after,
        selected: Vec::new(),
        out: RayRender {
            color: [T::zero(); 3],
            depth: T::zero(),
            opacity: T::zero(),
        },
    }
}

fn finish_ray<T: Real>(tape: &mut RayTape<T>, colors: &Array2<T>, bg: T, far: f64) {
    let mut c = [T::zero(); 3];
    for &(i, row) in &tape.selected {
        let w = tape.weights[i];
        for ch in 0..3 {
            c[ch] += w * colors[[row, ch]];
        }
    }
    let opacity: T = tape.weights.iter().copied().sum();
    for ch in c.iter_mut() {
        *ch += (T::one() - opacity) * bg;
    }
    let depth = if opacity > T::lit(OPACITY_EPS) {
        let mut acc = T::zero();
        for (w, &t) in tape.weights.iter().zip(&tape.t) {
            acc += *w * T::lit(t);
        }
        acc / opacity
    } else {
        T::lit(far)
    };
    tape.out = RayRender { color: c, depth, opacity };
}

/// Renders a batch of rays through one field and records a tape.
/// Each ray draws its own jitter from `jitter` in batch order.
pub fn render_rays<T: Real>(
    field: &VmField<T>,
    rays: &[Ray],
    cfg: &RenderConfig,
    mut jitter: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<RayRender<T>>, IndependentTape<T>)> {
    cfg.validate()?;
    let thr = T::lit(cfg.weight_threshold);
    let mut tapes = Vec::with_capacity(rays.len());
    let mut queries: Vec<([f64; 3], Vec3)> = Vec::new();
    for ray in rays {
        let (t, delta) = sample_distances(cfg.near, cfg.far, cfg.samples_per_ray, jitter.as_deref_mut());
        let mut tape = density_pass(field, ray, t, delta);
        for i in 0..tape.t.len() {
            if tape.interps[i].is_some() && tape.weights[i] > thr {
                let p = ray.origin + ray.direction * tape.t[i];
                tape.selected.push((i, queries.len()));
                queries.push((field.aabb.to_unit(&p), ray.direction));
            }
        }
        tapes.push(tape);
    }
    let (colors, color) = field.color_batch_tape(&queries);
    let bg = cfg.background::<T>();
    for tape in &mut tapes {
        finish_ray(tape, &colors, bg, cfg.far);
    }
    let outs = tapes.iter().map(|t| t.out).collect();
    Ok((
        outs,
        IndependentTape {
            stamp: field.stamp(),
            rays: tapes,
            color,
            colors,
            background: bg,
        },
    ))
}

/// Standard volume rendering of one ray through one field, unjittered.
pub fn render_ray_independent<T: Real>(field: &VmField<T>, ray: &Ray, cfg: &RenderConfig) -> Result<RayRender<T>> {
    let (out, _) = render_rays(field, std::slice::from_ref(ray), cfg, None)?;
    Ok(out[0])
}

/// `dL/dw_i` for one ray given output gradients.
pub(crate) fn output_weight_grads<T: Real>(
    w_len: usize,
    t: &[f64],
    sample_color: impl Fn(usize) -> Option<[T; 3]>,
    out: &RayRender<T>,
    g: &RayGrad<T>,
    bg: T,
) -> Vec<T> {
    let has_depth = out.opacity > T::lit(OPACITY_EPS);
    let g_bg = g.color[0] * bg + g.color[1] * bg + g.color[2] * bg;
    (0..w_len)
        .map(|i| {
            let mut gw = g.opacity - g_bg;
            if let Some(c) = sample_color(i) {
                gw += g.color[0] * c[0] + g.color[1] * c[1] + g.color[2] * c[2];
            }
            if has_depth {
                gw += g.depth * (T::lit(t[i]) - out.depth) / out.opacity;
            }
            gw
        })
        .collect()
}

/// Accumulates parameter gradients for a taped batch into `grads`.
pub fn field_backward_into<T: Real>(
    field: &VmField<T>,
    tape: &IndependentTape<T>,
    loss_grads: &[RayGrad<T>],
    grads: &mut FieldGrads<T>,
) -> Result<()> {
    if tape.stamp != field.stamp() {
        return Err(Error::StaleTape);
    }
    if loss_grads.len() != tape.rays.len() {
        return Err(Error::Dimension {
            what: "ray gradients",
            expected: tape.rays.len(),
            got: loss_grads.len(),
        });
    }
    let mut d_rgb = Array2::<T>::zeros(tape.colors.raw_dim());
    for (rt, g) in tape.rays.iter().zip(loss_grads) {
        let mut row_of = vec![usize::MAX; rt.t.len()];
        for &(i, row) in &rt.selected {
            row_of[i] = row;
            for ch in 0..3 {
                d_rgb[[row, ch]] += rt.weights[i] * g.color[ch];
            }
        }
        let colors = &tape.colors;
        let g_w = output_weight_grads(
            rt.t.len(),
            &rt.t,
            |i| (row_of[i] != usize::MAX).then(|| [0, 1, 2].map(|ch| colors[[row_of[i], ch]])),
            &rt.out,
            g,
            tape.background,
        );
        let g_sigma = weights_backward(&rt.weights, &rt.after, rt.delta, &g_w);
        for (i, it) in rt.interps.iter().enumerate() {
            if let Some(it) = it {
                let g_a = g_sigma[i] * VmField::<T>::activate_grad(rt.raw[i]);
                if g_a != T::zero() {
                    field.density_raw_backward(it, g_a, grads);
                }
            }
        }
    }
    field.color_backward(&tape.color, &d_rgb, grads)
}

/// Parameter gradients for a taped batch.
pub fn field_backward<T: Real>(
    field: &VmField<T>,
    tape: &IndependentTape<T>,
    loss_grads: &[RayGrad<T>],
) -> Result<FieldGrads<T>> {
    let mut grads = field.grads_zeros();
    field_backward_into(field, tape, loss_grads, &mut grads)?;
    Ok(grads)
}
