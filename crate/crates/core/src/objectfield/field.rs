use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::nn::{Mlp, MlpTape};
use crate::real::{sigmoid, softplus, Real};

/// Axes spanned by plane `j`; line `j` runs along the remaining axis.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
pub const LINE_AXIS: [usize; 3] = [2, 1, 0];

/// Pre-activation shift so that an all-zero field is (almost) empty.
pub const DENSITY_SHIFT: f64 = -10.0;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldShape {
    pub resolution: [usize; 3],
    pub density_rank: usize,
    pub app_rank: usize,
    pub app_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub dir_freqs: usize,
}

impl Default for FieldShape {
    fn default() -> Self {
        Self {
            resolution: [64; 3],
            density_rank: 16,
            app_rank: 48,
            app_dim: 27,
            hidden: 64,
            hidden_layers: 2,
            dir_freqs: 4,
        }
    }
}

impl FieldShape {
    pub fn with_resolution(mut self, res: usize) -> Self {
        self.resolution = [res; 3];
        self
    }

    pub fn dir_dim(&self) -> usize {
        3 + 6 * self.dir_freqs
    }

    pub fn mlp_widths(&self) -> Vec<usize> {
        let mut w = vec![self.app_dim + self.dir_dim()];
        w.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        w.push(3);
        w
    }

    pub fn plane_len(&self, j: usize, rank: usize) -> usize {
        let (a, b) = PLANE_AXES[j];
        self.resolution[a] * self.resolution[b] * rank
    }

    pub fn line_len(&self, j: usize, rank: usize) -> usize {
        self.resolution[LINE_AXIS[j]] * rank
    }

    fn validate(&self) -> Result<()> {
        if self.resolution.iter().any(|&n| n < 2) {
            return Err(Error::Domain(format!("field resolution {:?} must be at least 2", self.resolution)));
        }
        if self.density_rank == 0 || self.app_rank == 0 || self.app_dim == 0 || self.hidden == 0 {
            return Err(Error::Domain("field ranks and widths must be positive".into()));
        }
        Ok(())
    }
}

/// Axis-aligned box mapped onto the unit cube.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Aabb {
    fn default() -> Self {
        Self {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|i| !(min[i].is_finite() && max[i].is_finite() && max[i] > min[i])) {
            return Err(Error::Domain(format!("invalid bounding box {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn to_unit(&self, p: &Vec3) -> [f64; 3] {
        [0, 1, 2].map(|i| (p[i] - self.min[i]) / (self.max[i] - self.min[i]))
    }

    pub fn from_unit(&self, u: [f64; 3]) -> Vec3 {
        Vec3::new(
            self.min[0] + u[0] * (self.max[0] - self.min[0]),
            self.min[1] + u[1] * (self.max[1] - self.min[1]),
            self.min[2] + u[2] * (self.max[2] - self.min[2]),
        )
    }

    /// Ray parameter interval inside the box, if any.
    pub fn clip_ray(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-300 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let a = (self.min[i] - origin[i]) / dir[i];
            let b = (self.max[i] - origin[i]) / dir[i];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t1 >= t0).then_some((t0, t1))
    }
}

/// Trainable tensors of a field. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct VmParams<T> {
    /// `[n_a][n_b][R_σ]`, channel-last.
    pub density_planes: [Vec<T>; 3],
    /// `[n_c][R_σ]`.
    pub density_lines: [Vec<T>; 3],
    pub app_planes: [Vec<T>; 3],
    pub app_lines: [Vec<T>; 3],
    /// Stacked `[3 R_a, app_dim]`; rows `j R_a ..` form the basis of plane/line pair `j`.
    pub basis: Array2<T>,
    pub color_mlp: Mlp<T>,
}

impl<T: Real> VmParams<T> {
    pub fn zeros(shape: &FieldShape) -> Self {
        let planes = |r| [0, 1, 2].map(|j| vec![T::zero(); shape.plane_len(j, r)]);
        let lines = |r| [0, 1, 2].map(|j| vec![T::zero(); shape.line_len(j, r)]);
        Self {
            density_planes: planes(shape.density_rank),
            density_lines: lines(shape.density_rank),
            app_planes: planes(shape.app_rank),
            app_lines: lines(shape.app_rank),
            basis: Array2::zeros((3 * shape.app_rank, shape.app_dim)),
            color_mlp: Mlp::zeros(&shape.mlp_widths()),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    /// Fixed tensor order shared by the optimizer and the checkpoint format.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for group in [&self.density_planes, &self.density_lines, &self.app_planes, &self.app_lines] {
            out.extend(group.iter().map(Vec::as_slice));
        }
        out.push(self.basis.as_slice().expect("standard layout"));
        out.extend(self.color_mlp.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for group in [
            &mut self.density_planes,
            &mut self.density_lines,
            &mut self.app_planes,
            &mut self.app_lines,
        ] {
            out.extend(group.iter_mut().map(Vec::as_mut_slice));
        }
        out.push(self.basis.as_slice_mut().expect("standard layout"));
        out.extend(self.color_mlp.tensors_mut());
        out
    }

    /// Names matching [`VmParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for group in ["density_plane", "density_line", "app_plane", "app_line"] {
            out.extend((0..3).map(|j| format!("{group}{j}")));
        }
        out.push("basis".into());
        for i in 0..self.color_mlp.layers.len() {
            out.push(format!("mlp_w{i}"));
            out.push(format!("mlp_b{i}"));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= k;
            }
        }
    }

    pub fn max_abs(&self) -> T {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn cast<U: Real>(&self) -> VmParams<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.to_f64_lossy())).collect::<Vec<U>>();
        VmParams {
            density_planes: self.density_planes.each_ref().map(conv),
            density_lines: self.density_lines.each_ref().map(conv),
            app_planes: self.app_planes.each_ref().map(conv),
            app_lines: self.app_lines.each_ref().map(conv),
            basis: self.basis.mapv(|x| U::lit(x.to_f64_lossy())),
            color_mlp: self.color_mlp.cast(),
        }
    }
}

pub type FieldGrads<T> = VmParams<T>;

/// Trilinear lookup data for one point of the unit cube.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interp<T> {
    pub idx: [usize; 3],
    pub frac: [T; 3],
}

impl<T: Real> Interp<T> {
    /// `None` outside `[0, 1]³` (and for non-finite input).
    pub fn new(u: [f64; 3], res: [usize; 3]) -> Option<Self> {
        let mut idx = [0usize; 3];
        let mut frac = [T::zero(); 3];
        for i in 0..3 {
            if !(0.0..=1.0).contains(&u[i]) {
                return None;
            }
            let g = u[i] * (res[i] - 1) as f64;
            let i0 = (g.floor() as usize).min(res[i] - 2);
            idx[i] = i0;
            frac[i] = T::lit(g - i0 as f64);
        }
        Some(Self { idx, frac })
    }

    /// Corner offsets (in nodes) and weights for plane `j`.
    #[inline]
    fn plane(&self, j: usize, res: [usize; 3]) -> ([usize; 4], [T; 4]) {
        let (a, b) = PLANE_AXES[j];
        let nb = res[b];
        let base = self.idx[a] * nb + self.idx[b];
        let (fa, fb) = (self.frac[a], self.frac[b]);
        let one = T::one();
        (
            [base, base + nb, base + 1, base + nb + 1],
            [(one - fa) * (one - fb), fa * (one - fb), (one - fa) * fb, fa * fb],
        )
    }

    #[inline]
    fn line(&self, j: usize) -> ([usize; 2], [T; 2]) {
        let c = LINE_AXIS[j];
        let f = self.frac[c];
        ([self.idx[c], self.idx[c] + 1], [T::one() - f, f])
    }
}

/// Interpolated plane and line vectors for one factor group at one point.
#[inline]
fn gather<T: Real>(
    plane: &[T],
    line: &[T],
    rank: usize,
    pc: &([usize; 4], [T; 4]),
    lc: &([usize; 2], [T; 2]),
    p_out: &mut [T],
    l_out: &mut [T],
) {
    let (pi, pw) = pc;
    let (li, lw) = lc;
    let p0 = &plane[pi[0] * rank..pi[0] * rank + rank];
    let p1 = &plane[pi[1] * rank..pi[1] * rank + rank];
    let p2 = &plane[pi[2] * rank..pi[2] * rank + rank];
    let p3 = &plane[pi[3] * rank..pi[3] * rank + rank];
    let l0 = &line[li[0] * rank..li[0] * rank + rank];
    let l1 = &line[li[1] * rank..li[1] * rank + rank];
    for r in 0..rank {
        p_out[r] = pw[0] * p0[r] + pw[1] * p1[r] + pw[2] * p2[r] + pw[3] * p3[r];
        l_out[r] = lw[0] * l0[r] + lw[1] * l1[r];
    }
}

/// Adds `g_p` into the plane corners and `g_l` into the line nodes.
#[inline]
fn scatter<T: Real>(
    plane: &mut [T],
    line: &mut [T],
    rank: usize,
    pc: &([usize; 4], [T; 4]),
    lc: &([usize; 2], [T; 2]),
    g_p: &[T],
    g_l: &[T],
) {
    let (pi, pw) = pc;
    let (li, lw) = lc;
    for c in 0..4 {
        let dst = &mut plane[pi[c] * rank..pi[c] * rank + rank];
        for r in 0..rank {
            dst[r] += pw[c] * g_p[r];
        }
    }
    for c in 0..2 {
        let dst = &mut line[li[c] * rank..li[c] * rank + rank];
        for r in 0..rank {
            dst[r] += lw[c] * g_l[r];
        }
    }
}

/// Frequency encoding `[d, sin(2^l π d), cos(2^l π d)]`, or zeros when disabled.
pub fn encode_direction<T: Real>(d: &Vec3, freqs: usize, enabled: bool, out: &mut [T]) {
    out.fill(T::zero());
    if !enabled {
        return;
    }
    for i in 0..3 {
        out[i] = T::lit(d[i]);
    }
    let mut k = 3;
    for l in 0..freqs {
        let w = std::f64::consts::PI * (1u64 << l) as f64;
        for i in 0..3 {
            out[k + i] = T::lit((w * d[i]).sin());
            out[k + 3 + i] = T::lit((w * d[i]).cos());
        }
        k += 6;
    }
}

/// Recorded color evaluation for [`VmField::color_backward`].
#[derive(Debug)]
pub struct ColorTape<T> {
    stamp: u64,
    interps: Vec<Interp<T>>,
    app: Array2<T>,
    mlp: MlpTape<T>,
    rgb: Array2<T>,
}

impl<T> ColorTape<T> {
    pub fn len(&self) -> usize {
        self.interps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interps.is_empty()
    }
}

/// A VM-factored radiance field over its bounding box.
#[derive(Debug)]
pub struct VmField<T> {
    pub shape: FieldShape,
    pub aabb: Aabb,
    pub encode_directions: bool,
    params: VmParams<T>,
    stamp: u64,
    queries: AtomicU64,
}

impl<T: Real> Clone for VmField<T> {
    fn clone(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            aabb: self.aabb,
            encode_directions: self.encode_directions,
            params: self.params.clone(),
            stamp: self.stamp,
            queries: AtomicU64::new(0),
        }
    }
}

impl<T: Real> VmField<T> {
    pub fn zeros(shape: FieldShape, aabb: Aabb) -> Result<Self> {
        shape.validate()?;
        let params = VmParams::zeros(&shape);
        Ok(Self::from_params(shape, aabb, params))
    }

    /// Factor entries ~ N(0, init_std²), basis and MLP He-initialized.
    pub fn random<R: Rng + ?Sized>(shape: FieldShape, aabb: Aabb, init_std: f64, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let mut params = VmParams::<T>::zeros(&shape);
        let normal = Normal::new(0.0, init_std.max(0.0)).map_err(|e| Error::Domain(e.to_string()))?;
        for group in [
            &mut params.density_planes,
            &mut params.density_lines,
            &mut params.app_planes,
            &mut params.app_lines,
        ] {
            for t in group.iter_mut() {
                for v in t.iter_mut() {
                    *v = T::lit(normal.sample(rng));
                }
            }
        }
        let bstd = (1.0 / (3 * shape.app_rank) as f64).sqrt();
        params.basis.mapv_inplace(|_| {
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            T::lit(bstd * z)
        });
        params.color_mlp = Mlp::new(&shape.mlp_widths(), rng);
        Ok(Self::from_params(shape, aabb, params))
    }

    pub fn from_params(shape: FieldShape, aabb: Aabb, params: VmParams<T>) -> Self {
        Self {
            shape,
            aabb,
            encode_directions: true,
            params,
            stamp: fresh_stamp(),
            queries: AtomicU64::new(0),
        }
    }

    pub fn params(&self) -> &VmParams<T> {
        &self.params
    }

    /// Mutable access; invalidates every tape recorded so far.
    pub fn params_mut(&mut self) -> &mut VmParams<T> {
        self.stamp = fresh_stamp();
        &mut self.params
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn grads_zeros(&self) -> FieldGrads<T> {
        VmParams::zeros(&self.shape)
    }

    /// Number of density evaluations performed through rendering and queries.
    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn reset_query_count(&self) {
        self.queries.store(0, Ordering::Relaxed);
    }

    pub(crate) fn count_queries(&self, n: usize) {
        self.queries.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn cast<U: Real>(&self) -> VmField<U> {
        let mut f = VmField::from_params(self.shape.clone(), self.aabb, self.params.cast());
        f.encode_directions = self.encode_directions;
        f
    }

    #[inline]
    pub fn interp(&self, u: [f64; 3]) -> Option<Interp<T>> {
        Interp::new(u, self.shape.resolution)
    }

    /// Pre-activation density at a lookup.
    pub fn density_raw(&self, it: &Interp<T>) -> T {
        let rank = self.shape.density_rank;
        let res = self.shape.resolution;
        let mut p = [T::zero(); 64];
        let mut l = [T::zero(); 64];
        let mut acc = T::zero();
        for j in 0..3 {
            let pc = it.plane(j, res);
            let lc = it.line(j);
            let mut r0 = 0;
            // Ranks above 64 are processed in chunks through the stack buffers.
            while r0 < rank {
                let n = (rank - r0).min(64);
                gather_range(
                    &self.params.density_planes[j],
                    &self.params.density_lines[j],
                    rank,
                    r0,
                    n,
                    &pc,
                    &lc,
                    &mut p[..n],
                    &mut l[..n],
                );
                for r in 0..n {
                    acc += p[r] * l[r];
                }
                r0 += n;
            }
        }
        acc
    }

    /// Adds `g · ∂a/∂θ` for the pre-activation density `a` at a lookup.
    pub fn density_raw_backward(&self, it: &Interp<T>, g: T, grads: &mut FieldGrads<T>) {
        let rank = self.shape.density_rank;
        let res = self.shape.resolution;
        let mut p = vec![T::zero(); rank];
        let mut l = vec![T::zero(); rank];
        for j in 0..3 {
            let pc = it.plane(j, res);
            let lc = it.line(j);
            gather(
                &self.params.density_planes[j],
                &self.params.density_lines[j],
                rank,
                &pc,
                &lc,
                &mut p,
                &mut l,
            );
            for r in 0..rank {
                let (pr, lr) = (p[r], l[r]);
                p[r] = g * lr;
                l[r] = g * pr;
            }
            scatter(
                &mut grads.density_planes[j],
                &mut grads.density_lines[j],
                rank,
                &pc,
                &lc,
                &p,
                &l,
            );
        }
    }

    #[inline]
    pub fn activate(a: T) -> T {
        softplus(a + T::lit(DENSITY_SHIFT))
    }

    #[inline]
    pub fn activate_grad(a: T) -> T {
        sigmoid(a + T::lit(DENSITY_SHIFT))
    }

    /// Density at a unit-cube point; zero outside.
    pub fn query_density(&self, u: [f64; 3]) -> T {
        self.count_queries(1);
        match self.interp(u) {
            Some(it) => Self::activate(self.density_raw(&it)),
            None => T::zero(),
        }
    }

    /// Color at a unit-cube point seen along direction `d`.
    pub fn query_color(&self, u: [f64; 3], d: &Vec3) -> [T; 3] {
        let rgb = self.color_batch(&[(u, *d)]);
        [rgb[[0, 0]], rgb[[0, 1]], rgb[[0, 2]]]
    }

    /// Appearance vectors `[P_j ⊙ L_j]_j` for each lookup, one row per point.
    fn appearance(&self, interps: &[Interp<T>]) -> Array2<T> {
        let rank = self.shape.app_rank;
        let res = self.shape.resolution;
        let mut out = Array2::zeros((interps.len(), 3 * rank));
        let mut p = vec![T::zero(); rank];
        let mut l = vec![T::zero(); rank];
        for (row, it) in out.outer_iter_mut().zip(interps) {
            let row = row.into_slice().expect("standard layout");
            for j in 0..3 {
                gather(
                    &self.params.app_planes[j],
                    &self.params.app_lines[j],
                    rank,
                    &it.plane(j, res),
                    &it.line(j),
                    &mut p,
                    &mut l,
                );
                let dst = &mut row[j * rank..(j + 1) * rank];
                for r in 0..rank {
                    dst[r] = p[r] * l[r];
                }
            }
        }
        out
    }

    fn color_inputs(&self, queries: &[([f64; 3], Vec3)]) -> (Vec<Interp<T>>, Array2<T>, Array2<T>) {
        let res = self.shape.resolution;
        let interps: Vec<Interp<T>> = queries
            .iter()
            .map(|(u, _)| {
                let c = u.map(|x| x.clamp(0.0, 1.0));
                Interp::new(c, res).expect("clamped point")
            })
            .collect();
        let app = self.appearance(&interps);
        let feat = app.dot(&self.params.basis);
        let ad = self.shape.app_dim;
        let dd = self.shape.dir_dim();
        let mut x = Array2::zeros((queries.len(), ad + dd));
        x.slice_mut(s![.., ..ad]).assign(&feat);
        for (mut row, (_, d)) in x.outer_iter_mut().zip(queries) {
            let row = row.as_slice_mut().expect("standard layout");
            encode_direction(d, self.shape.dir_freqs, self.encode_directions, &mut row[ad..]);
        }
        (interps, app, x)
    }

    /// Colors for a batch of `(unit point, direction)` pairs, one row each.
    /// Points are clamped to the unit cube.
    pub fn color_batch(&self, queries: &[([f64; 3], Vec3)]) -> Array2<T> {
        if queries.is_empty() {
            return Array2::zeros((0, 3));
        }
        let (_, _, x) = self.color_inputs(queries);
        self.params.color_mlp.forward(x.view()).mapv(sigmoid)
    }

    pub fn color_batch_tape(&self, queries: &[([f64; 3], Vec3)]) -> (Array2<T>, ColorTape<T>) {
        let (interps, app, x) = self.color_inputs(queries);
        let (rgb, mlp) = if queries.is_empty() {
            (Array2::zeros((0, 3)), self.params.color_mlp.forward_tape(x).1)
        } else {
            let (logits, mlp) = self.params.color_mlp.forward_tape(x);
            (logits.mapv(sigmoid), mlp)
        };
        let tape = ColorTape {
            stamp: self.stamp,
            interps,
            app,
            mlp,
            rgb: rgb.clone(),
        };
        (rgb, tape)
    }

    /// Accumulates parameter gradients given `dL/drgb` for every taped row.
    pub fn color_backward(&self, tape: &ColorTape<T>, d_rgb: &Array2<T>, grads: &mut FieldGrads<T>) -> Result<()> {
        if tape.stamp != self.stamp {
            return Err(Error::StaleTape);
        }
        if tape.is_empty() {
            return Ok(());
        }
        let one = T::one();
        let mut d_logit = d_rgb.clone();
        ndarray::Zip::from(&mut d_logit)
            .and(&tape.rgb)
            .for_each(|g, &c| *g = *g * c * (one - c));
        let dx = self.params.color_mlp.backward(&tape.mlp, d_logit, &mut grads.color_mlp);
        let d_feat = dx.slice(s![.., ..self.shape.app_dim]);
        grads.basis += &tape.app.t().dot(&d_feat);
        let d_app = d_feat.dot(&self.params.basis.t());

        let rank = self.shape.app_rank;
        let res = self.shape.resolution;
        let mut p = vec![T::zero(); rank];
        let mut l = vec![T::zero(); rank];
        for (it, drow) in tape.interps.iter().zip(d_app.outer_iter()) {
            for j in 0..3 {
                let pc = it.plane(j, res);
                let lc = it.line(j);
                gather(
                    &self.params.app_planes[j],
                    &self.params.app_lines[j],
                    rank,
                    &pc,
                    &lc,
                    &mut p,
                    &mut l,
                );
                for r in 0..rank {
                    let g = drow[j * rank + r];
                    let (pr, lr) = (p[r], l[r]);
                    p[r] = g * lr;
                    l[r] = g * pr;
                }
                scatter(&mut grads.app_planes[j], &mut grads.app_lines[j], rank, &pc, &lc, &p, &l);
            }
        }
        Ok(())
    }

    /// Resamples every factor grid to a finer resolution.
    pub fn upsample(&self, new_resolution: [usize; 3]) -> Result<Self> {
        let old = self.shape.resolution;
        if (0..3).any(|i| new_resolution[i] < old[i]) {
            return Err(Error::Shrink {
                from: old,
                to: new_resolution,
            });
        }
        if new_resolution == old {
            return Ok(self.clone());
        }
        let mut shape = self.shape.clone();
        shape.resolution = new_resolution;
        let resample_group = |planes: &[Vec<T>; 3], lines: &[Vec<T>; 3], rank: usize| {
            let p = [0, 1, 2].map(|j| {
                let (a, b) = PLANE_AXES[j];
                resample_plane(&planes[j], (old[a], old[b]), (new_resolution[a], new_resolution[b]), rank)
            });
            let l = [0, 1, 2].map(|j| {
                let c = LINE_AXIS[j];
                resample_line(&lines[j], old[c], new_resolution[c], rank)
            });
            (p, l)
        };
        let (dp, dl) = resample_group(&self.params.density_planes, &self.params.density_lines, shape.density_rank);
        let (ap, al) = resample_group(&self.params.app_planes, &self.params.app_lines, shape.app_rank);
        let params = VmParams {
            density_planes: dp,
            density_lines: dl,
            app_planes: ap,
            app_lines: al,
            basis: self.params.basis.clone(),
            color_mlp: self.params.color_mlp.clone(),
        };
        let mut f = Self::from_params(shape, self.aabb, params);
        f.encode_directions = self.encode_directions;
        Ok(f)
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn gather_range<T: Real>(
    plane: &[T],
    line: &[T],
    rank: usize,
    r0: usize,
    n: usize,
    pc: &([usize; 4], [T; 4]),
    lc: &([usize; 2], [T; 2]),
    p_out: &mut [T],
    l_out: &mut [T],
) {
    let (pi, pw) = pc;
    let (li, lw) = lc;
    let at = |node: usize| node * rank + r0;
    let p0 = &plane[at(pi[0])..at(pi[0]) + n];
    let p1 = &plane[at(pi[1])..at(pi[1]) + n];
    let p2 = &plane[at(pi[2])..at(pi[2]) + n];
    let p3 = &plane[at(pi[3])..at(pi[3]) + n];
    let l0 = &line[at(li[0])..at(li[0]) + n];
    let l1 = &line[at(li[1])..at(li[1]) + n];
    for r in 0..n {
        p_out[r] = pw[0] * p0[r] + pw[1] * p1[r] + pw[2] * p2[r] + pw[3] * p3[r];
        l_out[r] = lw[0] * l0[r] + lw[1] * l1[r];
    }
}

/// Lower node and fraction for sampling node `i` of `n_new` on an `n_old` grid.
fn resample_coord(i: usize, n_old: usize, n_new: usize) -> (usize, f64) {
    let g = i as f64 * (n_old - 1) as f64 / (n_new - 1) as f64;
    let i0 = (g.floor() as usize).min(n_old - 2);
    (i0, g - i0 as f64)
}

fn resample_line<T: Real>(src: &[T], n_old: usize, n_new: usize, rank: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n_new * rank];
    for i in 0..n_new {
        let (i0, f) = resample_coord(i, n_old, n_new);
        let f = T::lit(f);
        for r in 0..rank {
            out[i * rank + r] = (T::one() - f) * src[i0 * rank + r] + f * src[(i0 + 1) * rank + r];
        }
    }
    out
}

fn resample_plane<T: Real>(src: &[T], old: (usize, usize), new: (usize, usize), rank: usize) -> Vec<T> {
    let mut out = vec![T::zero(); new.0 * new.1 * rank];
    let one = T::one();
    for ia in 0..new.0 {
        let (a0, fa) = resample_coord(ia, old.0, new.0);
        let fa = T::lit(fa);
        for ib in 0..new.1 {
            let (b0, fb) = resample_coord(ib, old.1, new.1);
            let fb = T::lit(fb);
            let c = |a: usize, b: usize| (a * old.1 + b) * rank;
            let (c00, c10, c01, c11) = (c(a0, b0), c(a0 + 1, b0), c(a0, b0 + 1), c(a0 + 1, b0 + 1));
            let w = [(one - fa) * (one - fb), fa * (one - fb), (one - fa) * fb, fa * fb];
            let dst = (ia * new.1 + ib) * rank;
            for r in 0..rank {
                out[dst + r] =
                    w[0] * src[c00 + r] + w[1] * src[c10 + r] + w[2] * src[c01 + r] + w[3] * src[c11 + r];
            }
        }
    }
    out
}
