use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_direction_between_objects, transform_point_between_objects, Pose, Ray, ScaleCombination, Vec3};
use crate::objectfield::{
    compute_weights, output_weight_grads, sample_distances, weights_backward, ColorTape, FieldGrads, Interp,
    RayGrad, RayRender, RenderConfig, VmField, OPACITY_EPS,
};
use crate::real::Real;

/// Scene-level output of one ray.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOutput<T> {
    pub color: [T; 3],
    /// Weight-averaged distance in the denormalized scene metric.
    pub depth: T,
    pub opacity: T,
    /// Soft one-hot object assignment.
    pub segmentation: Vec<T>,
}

impl<T: Real> RenderOutput<T> {
    /// Index of the largest segmentation entry, lowest index on ties.
    pub fn label(&self) -> usize {
        argmax(&self.segmentation)
    }
}

pub(crate) fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

/// Loss gradients with respect to one composite output.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompositeGrad<T> {
    pub color: [T; 3],
    pub depth: T,
    pub opacity: T,
    pub segmentation: Vec<T>,
}

/// Sum of values in ascending order, so the result does not depend on the
/// order objects are listed in.
fn ordered_sum<T: Real>(vals: &mut [T]) -> T {
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut it = vals.iter();
    match it.next() {
        Some(&first) => it.fold(first, |acc, &v| acc + v),
        None => T::zero(),
    }
}

/// Poses of every object at one frame, looked up from `[object][frame]` tracks.
pub fn frame_poses(tracks: &[Vec<Pose>], frame: usize) -> Result<Vec<Pose>> {
    tracks
        .iter()
        .map(|t| {
            t.get(frame).cloned().ok_or(Error::MissingFrame {
                frame,
                frames: t.len(),
            })
        })
        .collect()
}

fn check_inputs<T>(fields: &[VmField<T>], poses: &[Pose], ray: &Ray, scales: &ScaleCombination) -> Result<()> {
    let k = fields.len();
    if poses.len() != k {
        return Err(Error::Dimension {
            what: "object poses",
            expected: k,
            got: poses.len(),
        });
    }
    if scales.len() != k {
        return Err(Error::Dimension {
            what: "scale combination",
            expected: k,
            got: scales.len(),
        });
    }
    if ray.owner >= k {
        return Err(Error::Dimension {
            what: "ray owner",
            expected: k,
            got: ray.owner,
        });
    }
    Ok(())
}

/// The owner ray expressed in object `j`'s space: origin and unit direction.
/// Distances along it are in object `j`'s metric.
pub fn ray_in_object(ray: &Ray, poses: &[Pose], scales: &[f64], j: usize) -> (Vec3, Vec3) {
    let k = ray.owner;
    if j == k {
        return (ray.origin, ray.direction);
    }
    let o = transform_point_between_objects(&ray.origin, &poses[k], &poses[j], scales[k], scales[j]);
    let d = transform_direction_between_objects(&ray.direction, &poses[k], &poses[j]);
    (o, d)
}

#[derive(Debug)]
struct ObjectSamples<T> {
    interps: Vec<Option<Interp<T>>>,
    raw: Vec<T>,
    /// Density divided by the object's scale.
    sigma: Vec<T>,
}

#[derive(Debug)]
struct CompositeRayTape<T> {
    tau: Vec<f64>,
    delta: T,
    objects: Vec<ObjectSamples<T>>,
    total: Vec<T>,
    weights: Vec<T>,
    after: Vec<T>,
    /// `(sample, object, color row)` for every evaluated color.
    selected: Vec<(usize, usize, usize)>,
    /// Merged color per sample, zero where no color was evaluated.
    merged: Vec<Option<[T; 3]>>,
    out: RenderOutput<T>,
}

/// Forward record of a composite batch.
#[derive(Debug)]
pub struct CompositeTape<T> {
    stamps: Vec<u64>,
    inv_scales: Vec<T>,
    rays: Vec<CompositeRayTape<T>>,
    colors: Vec<Array2<T>>,
    color_tapes: Vec<ColorTape<T>>,
    background: T,
}

impl<T> CompositeTape<T> {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

fn pi_of<T: Real>(tape: &CompositeRayTape<T>, i: usize, j: usize) -> T {
    let s = tape.total[i];
    if s > T::zero() {
        tape.objects[j].sigma[i] / s
    } else {
        T::zero()
    }
}

/// Renders rays through all objects merged under one scale combination.
///
/// Samples are spaced uniformly in the scene metric over `[cfg.near, cfg.far]`.
/// `tracks` holds `[object][frame]` camera-to-object poses; each ray uses its
/// own frame. Every ray draws its jitter from `jitter` in batch order.
pub fn composite_render_rays<T: Real>(
    fields: &[VmField<T>],
    tracks: &[Vec<Pose>],
    rays: &[Ray],
    scales: &ScaleCombination,
    cfg: &RenderConfig,
    mut jitter: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<RenderOutput<T>>, CompositeTape<T>)> {
    cfg.validate()?;
    let k = fields.len();
    if tracks.len() != k {
        return Err(Error::Dimension {
            what: "pose tracks",
            expected: k,
            got: tracks.len(),
        });
    }
    let thr = T::lit(cfg.weight_threshold);
    let inv_scales: Vec<T> = scales.denorm.iter().map(|&s| T::one() / T::lit(s)).collect();
    let mut queries: Vec<Vec<([f64; 3], Vec3)>> = vec![Vec::new(); k];
    let mut tapes = Vec::with_capacity(rays.len());
    let mut frame_cache: Option<(usize, Vec<Pose>)> = None;
    for ray in rays {
        if frame_cache.as_ref().map(|(n, _)| *n) != Some(ray.frame) {
            frame_cache = Some((ray.frame, frame_poses(tracks, ray.frame)?));
        }
        let poses = &frame_cache.as_ref().expect("cached").1;
        check_inputs(fields, poses, ray, scales)?;
        let (tau, delta) = sample_distances(cfg.near, cfg.far, cfg.samples_per_ray, jitter.as_deref_mut());
        let m = tau.len();
        let frames: Vec<(Vec3, Vec3)> = (0..k).map(|j| ray_in_object(ray, poses, &scales.denorm, j)).collect();
        let mut objects = Vec::with_capacity(k);
        for (j, field) in fields.iter().enumerate() {
            field.count_queries(m);
            let (o, d) = frames[j];
            let mut interps = Vec::with_capacity(m);
            let mut raw = Vec::with_capacity(m);
            let mut sigma = Vec::with_capacity(m);
            for &ti in &tau {
                let p = o + d * (ti / scales.denorm[j]);
                let it = field.interp(field.aabb.to_unit(&p));
                let a = it.as_ref().map(|it| field.density_raw(it)).unwrap_or_else(T::zero);
                let s = if it.is_some() {
                    VmField::<T>::activate(a) / T::lit(scales.denorm[j])
                } else {
                    T::zero()
                };
                interps.push(it);
                raw.push(a);
                sigma.push(s);
            }
            objects.push(ObjectSamples { interps, raw, sigma });
        }
        let mut buf = vec![T::zero(); k];
        let total: Vec<T> = (0..m)
            .map(|i| {
                for j in 0..k {
                    buf[j] = objects[j].sigma[i];
                }
                ordered_sum(&mut buf)
            })
            .collect();
        let delta_t = T::lit(delta);
        let (weights, after) = compute_weights(&total, delta_t);
        let mut selected = Vec::new();
        for i in 0..m {
            if weights[i] > thr {
                for j in 0..k {
                    if objects[j].interps[i].is_some() {
                        let (o, d) = frames[j];
                        let p = o + d * (tau[i] / scales.denorm[j]);
                        selected.push((i, j, queries[j].len()));
                        queries[j].push((fields[j].aabb.to_unit(&p), d));
                    }
                }
            }
        }
        tapes.push(CompositeRayTape {
            tau,
            delta: delta_t,
            objects,
            total,
            weights,
            after,
            selected,
            merged: vec![None; m],
            out: RenderOutput {
                color: [T::zero(); 3],
                depth: T::zero(),
                opacity: T::zero(),
                segmentation: vec![T::zero(); k],
            },
        });
    }
    let mut colors = Vec::with_capacity(k);
    let mut color_tapes = Vec::with_capacity(k);
    for (field, q) in fields.iter().zip(&queries) {
        let (c, t) = field.color_batch_tape(q);
        colors.push(c);
        color_tapes.push(t);
    }
    let bg = cfg.background::<T>();
    for tape in &mut tapes {
        finish_composite(tape, &colors, bg, cfg.far, k);
    }
    let outs = tapes.iter().map(|t| t.out.clone()).collect();
    Ok((
        outs,
        CompositeTape {
            stamps: fields.iter().map(|f| f.stamp()).collect(),
            inv_scales,
            rays: tapes,
            colors,
            color_tapes,
            background: bg,
        },
    ))
}

fn finish_composite<T: Real>(tape: &mut CompositeRayTape<T>, colors: &[Array2<T>], bg: T, far: f64, k: usize) {
    let mut terms: Vec<Vec<T>> = vec![Vec::with_capacity(k); 3];
    let mut s = 0;
    while s < tape.selected.len() {
        let i = tape.selected[s].0;
        for t in terms.iter_mut() {
            t.clear();
        }
        while s < tape.selected.len() && tape.selected[s].0 == i {
            let (_, j, row) = tape.selected[s];
            let pi = pi_of(tape, i, j);
            for ch in 0..3 {
                terms[ch].push(pi * colors[j][[row, ch]]);
            }
            s += 1;
        }
        let c = [0, 1, 2].map(|ch| ordered_sum(&mut terms[ch]));
        tape.merged[i] = Some(c);
    }
    let mut color = [T::zero(); 3];
    for (i, c) in tape.merged.iter().enumerate() {
        if let Some(c) = c {
            let w = tape.weights[i];
            for ch in 0..3 {
                color[ch] += w * c[ch];
            }
        }
    }
    let opacity: T = tape.weights.iter().copied().sum();
    for ch in color.iter_mut() {
        *ch += (T::one() - opacity) * bg;
    }
    let has = opacity > T::lit(OPACITY_EPS);
    let depth = if has {
        let mut acc = T::zero();
        for (w, &t) in tape.weights.iter().zip(&tape.tau) {
            acc += *w * T::lit(t);
        }
        acc / opacity
    } else {
        T::lit(far)
    };
    let segmentation = if has {
        (0..k)
            .map(|j| {
                let mut acc = T::zero();
                for i in 0..tape.weights.len() {
                    acc += tape.weights[i] * pi_of(tape, i, j);
                }
                acc / opacity
            })
            .collect()
    } else {
        vec![T::one() / T::lit(k as f64); k]
    };
    tape.out = RenderOutput {
        color,
        depth,
        opacity,
        segmentation,
    };
}

/// Composite rendering of a single ray, unjittered. `poses` are the objects'
/// poses at the ray's frame.
pub fn scaled_composite_render<T: Real>(
    fields: &[VmField<T>],
    poses: &[Pose],
    ray: &Ray,
    scales: &ScaleCombination,
    cfg: &RenderConfig,
) -> Result<RenderOutput<T>> {
    check_inputs(fields, poses, ray, scales)?;
    let mut tracks: Vec<Vec<Pose>> = vec![Vec::new(); poses.len()];
    for (t, p) in tracks.iter_mut().zip(poses) {
        t.resize(ray.frame + 1, Pose::identity());
        t[ray.frame] = p.clone();
    }
    let (out, _) = composite_render_rays(fields, &tracks, std::slice::from_ref(ray), scales, cfg, None)?;
    Ok(out.into_iter().next().expect("one ray"))
}

/// Accumulates per-object parameter gradients for a taped composite batch.
pub fn composite_backward_into<T: Real>(
    fields: &[VmField<T>],
    tape: &CompositeTape<T>,
    loss_grads: &[CompositeGrad<T>],
    grads: &mut [FieldGrads<T>],
) -> Result<()> {
    let k = fields.len();
    if tape.stamps.len() != k || grads.len() != k {
        return Err(Error::Dimension {
            what: "objects",
            expected: tape.stamps.len(),
            got: k.min(grads.len()),
        });
    }
    if fields.iter().zip(&tape.stamps).any(|(f, &s)| f.stamp() != s) {
        return Err(Error::StaleTape);
    }
    if loss_grads.len() != tape.rays.len() {
        return Err(Error::Dimension {
            what: "ray gradients",
            expected: tape.rays.len(),
            got: loss_grads.len(),
        });
    }
    let mut d_rgb: Vec<Array2<T>> = tape.colors.iter().map(|c| Array2::zeros(c.raw_dim())).collect();
    for (rt, g) in tape.rays.iter().zip(loss_grads) {
        let m = rt.tau.len();
        let out = &rt.out;
        let has = out.opacity > T::lit(OPACITY_EPS);
        let base = RayRender {
            color: out.color,
            depth: out.depth,
            opacity: out.opacity,
        };
        let rg = RayGrad {
            color: g.color,
            depth: g.depth,
            opacity: g.opacity,
        };
        let mut g_w = output_weight_grads(m, &rt.tau, |i| rt.merged[i], &base, &rg, tape.background);
        let seg_grad = has && g.segmentation.iter().any(|&v| v != T::zero());
        if seg_grad {
            let g_dot_o: T = (0..k).map(|j| g.segmentation[j] * out.segmentation[j]).sum();
            for (i, gw) in g_w.iter_mut().enumerate() {
                let mut acc = T::zero();
                for j in 0..k {
                    acc += g.segmentation[j] * pi_of(rt, i, j);
                }
                *gw += (acc - g_dot_o) / out.opacity;
            }
        }
        let g_total = weights_backward(&rt.weights, &rt.after, rt.delta, &g_w);
        // dL/dπ_ij, dense over samples and objects.
        let mut g_pi = vec![T::zero(); m * k];
        for &(i, j, row) in &rt.selected {
            let w = rt.weights[i];
            let pi = pi_of(rt, i, j);
            let c = &tape.colors[j];
            let mut dot = T::zero();
            for ch in 0..3 {
                dot += g.color[ch] * c[[row, ch]];
                d_rgb[j][[row, ch]] += w * pi * g.color[ch];
            }
            g_pi[i * k + j] += w * dot;
        }
        if seg_grad {
            for i in 0..m {
                let f = rt.weights[i] / out.opacity;
                for j in 0..k {
                    g_pi[i * k + j] += f * g.segmentation[j];
                }
            }
        }
        for i in 0..m {
            let s = rt.total[i];
            let mut mean = T::zero();
            if s > T::zero() {
                for j in 0..k {
                    mean += g_pi[i * k + j] * pi_of(rt, i, j);
                }
            }
            for j in 0..k {
                let Some(it) = &rt.objects[j].interps[i] else { continue };
                let mut g_s = g_total[i];
                if s > T::zero() {
                    g_s += (g_pi[i * k + j] - mean) / s;
                }
                let g_a = g_s * tape.inv_scales[j] * VmField::<T>::activate_grad(rt.objects[j].raw[i]);
                if g_a != T::zero() {
                    fields[j].density_raw_backward(it, g_a, &mut grads[j]);
                }
            }
        }
    }
    for j in 0..k {
        fields[j].color_backward(&tape.color_tapes[j], &d_rgb[j], &mut grads[j])?;
    }
    Ok(())
}

pub fn composite_backward<T: Real>(
    fields: &[VmField<T>],
    tape: &CompositeTape<T>,
    loss_grads: &[CompositeGrad<T>],
) -> Result<Vec<FieldGrads<T>>> {
    let mut grads: Vec<FieldGrads<T>> = fields.iter().map(|f| f.grads_zeros()).collect();
    composite_backward_into(fields, tape, loss_grads, &mut grads)?;
    Ok(grads)
}
