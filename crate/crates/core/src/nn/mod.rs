//! Minimal CPU neural-network toolkit used by the importance and stego networks.
//!
//! Layers are explicit: each caches what it needs during [`Layer::forward`] and
//! consumes the upstream gradient in [`Layer::backward`]. [`Layer::infer`] is the
//! side-effect free path used at prediction time, so a trained network can be
//! shared across threads behind a plain reference.

mod act;
mod conv;
mod gemm;
pub mod io;
mod norm;
mod optim;
mod pool;

pub use act::{Relu, Sigmoid, Tanh};
pub use conv::{Conv2d, ConvTranspose2d};
pub use io::{load_bundle, save_bundle, BundleError};
pub use norm::BatchNorm2d;
pub use optim::Adam;
pub use pool::{MaxPool2, UpsampleNearest2};


use rand::Rng;

/// Dense NCHW tensor of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { shape: [n, c, h, w], data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self { shape, data }
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, b: usize) -> &[f32] {
        let l = self.sample_len();
        &self.data[b * l..(b + 1) * l]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f32] {
        let l = self.sample_len();
        &mut self.data[b * l..(b + 1) * l]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.n(), b.n());
        assert_eq!((a.h(), a.w()), (b.h(), b.w()));
        let (la, lb) = (a.sample_len(), b.sample_len());
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for i in 0..a.n() {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        debug_assert_eq!(data.len(), a.n() * (la + lb));
        Tensor::from_vec([a.n(), a.c() + b.c(), a.h(), a.w()], data)
    }

    /// Inverse of [`Tensor::concat_channels`]: split off the first `ca` channels.
    pub fn split_channels(&self, ca: usize) -> (Tensor, Tensor) {
        let plane = self.h() * self.w();
        let cb = self.c() - ca;
        let mut a = Tensor::zeros(self.n(), ca, self.h(), self.w());
        let mut b = Tensor::zeros(self.n(), cb, self.h(), self.w());
        for i in 0..self.n() {
            let s = self.sample(i);
            a.sample_mut(i).copy_from_slice(&s[..ca * plane]);
            b.sample_mut(i).copy_from_slice(&s[ca * plane..]);
        }
        (a, b)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Stack single-sample tensors into a batch.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty());
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            assert_eq!(t.shape, [1, c, h, w]);
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec([items.len(), c, h, w], data)
    }
}

/// A learnable (or persisted) buffer and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Running statistics are persisted but never touched by the optimizer.
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad, trainable: true }
    }

    pub fn buffer(value: Vec<f32>) -> Self {
        Self { grad: Vec::new(), value, trainable: false }
    }

    /// He-uniform initialisation for a layer with `fan_in` inputs.
    pub fn he_uniform(len: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f32).sqrt();
        Self::new((0..len).map(|_| rng.random_range(-bound..bound)).collect())
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub type ParamVisitor<'a> = dyn FnMut(&str, &Param) + 'a;
pub type ParamVisitorMut<'a> = dyn FnMut(&str, &mut Param) + 'a;

/// A differentiable building block.
pub trait Layer: Send + Sync {
    /// Pure forward pass with inference semantics (running statistics, no caches).
    fn infer(&self, x: &Tensor) -> Tensor;
    /// Training forward pass; caches whatever `backward` needs.
    fn forward(&mut self, x: &Tensor) -> Tensor;
    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    fn backward(&mut self, grad: &Tensor) -> Tensor;

    fn visit(&self, _prefix: &str, _f: &mut ParamVisitor<'_>) {}
    fn visit_mut(&mut self, _prefix: &str, _f: &mut ParamVisitorMut<'_>) {}
}

/// Anything that owns parameters: whole networks implement this so optimizers
/// and checkpoint IO can walk them.
pub trait Parameterized {
    fn visit(&self, f: &mut ParamVisitor<'_>);
    fn visit_mut(&mut self, f: &mut ParamVisitorMut<'_>);

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, layer: impl Layer + 'static) -> Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn infer(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.infer(&cur);
        }
        cur
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.forward(&cur);
        }
        cur
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Central-difference check of `layer.backward` against a scalar objective
    /// `sum(w_i * y_i)` with fixed random weights. Returns the worst relative error
    /// over the input gradient and all parameter gradients.
    pub fn check_layer<L: Layer>(layer: &mut L, x: &Tensor, seed: u64) -> f64 {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let y = layer.forward(x);
        let proj: Vec<f32> = (0..y.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |y: &Tensor| -> f64 {
            y.data.iter().zip(&proj).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        layer.visit_mut("", &mut |_, p| p.zero_grad());
        let _ = layer.forward(x);
        let gx = layer.backward(&Tensor::from_vec(y.shape, proj.clone()));

        let eps = 1e-2f32;
        let mut worst = 0.0f64;
        let mut rel = |analytic: f64, numeric: f64| {
            let denom = analytic.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max((analytic - numeric).abs() / denom);
        };
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let num = (objective(&layer.forward(&xp)) - objective(&layer.forward(&xm))) / (2.0 * eps as f64);
            rel(gx.data[i] as f64, num);
        }
        let mut grads: Vec<Vec<f32>> = Vec::new();
        layer.visit("", &mut |_, p| {
            if p.trainable {
                grads.push(p.grad.clone())
            }
        });
        let mut nparams = Vec::new();
        layer.visit("", &mut |_, p| {
            if p.trainable {
                nparams.push(p.value.len())
            }
        });
        for (pi, &len) in nparams.iter().enumerate() {
            for j in 0..len {
                let bump = |delta: f32, layer: &mut L| {
                    let mut idx = 0;
                    layer.visit_mut("", &mut |_, p| {
                        if p.trainable {
                            if idx == pi {
                                p.value[j] += delta;
                            }
                            idx += 1;
                        }
                    });
                };
                bump(eps, layer);
                let fp = objective(&layer.forward(x));
                bump(-2.0 * eps, layer);
                let fm = objective(&layer.forward(x));
                bump(eps, layer);
                rel(grads[pi][j] as f64, (fp - fm) / (2.0 * eps as f64));
            }
        }
        worst
    }

    pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }
}
