//! Small dense networks with hand-written backward passes, and Adam.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;

/// Fully connected layer computing `x W + b` for row-major batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `[inputs, outputs]`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// He-normal weights, zero bias.
    pub fn he<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / inputs.max(1) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        });
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }
}

/// ReLU hidden layers and a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

/// Activations recorded by [`Mlp::forward_tape`].
#[derive(Debug)]
pub struct MlpTape<T> {
    /// Input to each layer (post-ReLU for all but the first).
    inputs: Vec<Array2<T>>,
}

impl<T: Real> Mlp<T> {
    /// `widths = [in, h1, .., out]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let layers = widths.windows(2).map(|w| Dense::he(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        let layers = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self { layers }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs()];
        w.extend(self.layers.iter().map(Dense::outputs));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Dense::outputs).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                h.mapv_inplace(relu);
            }
        }
        h
    }

    pub fn forward_tape(&self, x: Array2<T>) -> (Array2<T>, MlpTape<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                next.mapv_inplace(relu);
            }
            inputs.push(h);
            h = next;
        }
        (h, MlpTape { inputs })
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, tape: &MlpTape<T>, d_out: Array2<T>, grads: &mut Mlp<T>) -> Array2<T> {
        let mut d = d_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.inputs[i];
            let g = &mut grads.layers[i];
            g.weight += &input.t().dot(&d);
            g.bias += &d.sum_axis(Axis(0));
            let mut d_in = d.dot(&layer.weight.t());
            if i > 0 {
                // `input` is the post-ReLU activation of the previous layer.
                ndarray::Zip::from(&mut d_in).and(input).for_each(|g, &a| {
                    if a <= T::zero() {
                        *g = T::zero();
                    }
                });
            }
            d = d_in;
        }
        d
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weight.fill(T::zero());
            l.bias.fill(T::zero());
        }
    }

    /// Parameter tensors in a fixed order: `w0, b0, w1, b1, ..`.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.mapv(|v| U::lit(v.to_f64_lossy())),
                    bias: l.bias.mapv(|v| U::lit(v.to_f64_lossy())),
                })
                .collect(),
        }
    }
}

#[inline]
fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam over a list of flat tensors. Moment buffers are created lazily on
/// the first step and must keep the same shapes afterwards.
#[derive(Clone, Debug, Default)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count");
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len(), "tensor {i} shape");
            assert_eq!(p.len(), self.m[i].len(), "tensor {i} changed shape; reset the optimizer");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
