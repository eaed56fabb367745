//! Dense layers with hand-written backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IcpaError, Result};

/// Logits are clamped to this range before any sigmoid or softplus.
pub const LOGIT_CLAMP: f64 = 30.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A named view of one parameter tensor.
#[derive(Debug, Clone)]
pub struct Tensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// A fixed collection of named tensors. Gradients and optimizer state use
/// the same type as the parameters they belong to.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<Tensor<'_>>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data);
        }
        out
    }

    /// `self += alpha * other`
    fn axpy(&mut self, alpha: f64, other: &Self) {
        let src = other.tensors();
        for (dst, t) in self.slices_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(t.data) {
                *d += alpha * s;
            }
        }
    }

    fn scale(&mut self, alpha: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    fn dot(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| dot(a.data, b.data))
            .sum()
    }

    fn check_finite(&self) -> Result<()> {
        for t in self.tensors() {
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(IcpaError::NonFinite(t.name));
            }
        }
        Ok(())
    }

    /// SHA-256 over the exact bit patterns of every tensor.
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            h.update(t.name.as_bytes());
            for x in t.data {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to `x`.
    pub fn backward(&self, x: &[f64], grad_z: &[f64], grads: &mut Dense) -> Vec<f64> {
        let mut gx = vec![0.0; self.in_dim];
        for (o, &gz) in grad_z.iter().enumerate() {
            if gz == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += gz * x[i];
                gx[i] += gz * row[i];
            }
            grads.bias[o] += gz;
        }
        gx
    }
}

/// Stack of dense layers with ELU after every hidden layer; the last layer
/// gets ELU only when `final_activation` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub final_activation: bool,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// `inputs[l]` is the input of layer `l`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        dims: &[usize],
        final_activation: bool,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(dims.len());
        let mut prev = in_dim;
        for &d in dims {
            layers.push(Dense::init(prev, d, rng));
            prev = d;
        }
        Self {
            layers,
            final_activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    fn activated(&self, l: usize) -> bool {
        l + 1 < self.layers.len() || self.final_activation
    }

    pub fn forward(&self, x: &[f64]) -> MlpTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            let next = if self.activated(l) {
                z.iter().map(|&v| elu(v)).collect()
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
        }
        MlpTrace {
            inputs,
            pre,
            output: h,
        }
    }

    pub fn backward(&self, trace: &MlpTrace, grad_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut g = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            if self.activated(l) {
                for (gi, &z) in g.iter_mut().zip(&trace.pre[l]) {
                    *gi *= elu_grad(z);
                }
            }
            g = self.layers[l].backward(&trace.inputs[l], &g, &mut grads.layers[l]);
        }
        g
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(Tensor {
                name: format!("{prefix}.{l}.weight"),
                shape: vec![layer.out_dim, layer.in_dim],
                data: &layer.weight,
            });
            out.push(Tensor {
                name: format!("{prefix}.{l}.bias"),
                shape: vec![layer.out_dim],
                data: &layer.bias,
            });
        }
    }

    pub(crate) fn push_slices_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
    }
}

/// `y = h / ||h||`. Returns `(y, ||h||)`; the norm is floored at 1e-12.
pub fn l2_normalize(h: &[f64]) -> (Vec<f64>, f64) {
    let norm = dot(h, h).sqrt().max(1e-12);
    (h.iter().map(|x| x / norm).collect(), norm)
}

/// Gradient of a loss through `y = h / ||h||` given `dL/dy`.
pub fn l2_normalize_backward(y: &[f64], norm: f64, grad_y: &[f64]) -> Vec<f64> {
    let proj = dot(y, grad_y);
    grad_y
        .iter()
        .zip(y)
        .map(|(g, yi)| (g - yi * proj) / norm)
        .collect()
}
