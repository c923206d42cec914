//! Dense multilayer perceptrons with hand-written backpropagation and Adam.
//!
//! Every row is computed independently in a fixed summation order, so a
//! state scored alone produces bit-identical output to the same state scored
//! inside a batch.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("gradient shape does not match the model")]
    Shape,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("model needs at least an input and an output dimension")]
    TooFewLayers,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Numerically stable softmax and its natural-log entropy.
pub fn softmax_entropy(logits: &[f64]) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_sum = sum.ln();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let entropy: f64 = -probs
        .iter()
        .zip(logits)
        .map(|(&p, &z)| if p > 0.0 { p * (z - max - log_sum) } else { 0.0 })
        .sum::<f64>();
    let upper = (logits.len() as f64).ln();
    (probs, entropy.clamp(0.0, upper))
}

/// Fully connected layer. `weights` is `in_dim x out_dim`, row-major, so row
/// `k` holds the outgoing weights of input `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.out_dim..(k + 1) * self.out_dim]
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (k, &x) in input.iter().enumerate() {
            if x != 0.0 {
                for (o, &w) in out.iter_mut().zip(self.row(k)) {
                    *o += x * w;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layer_dims: Vec<usize>,
    pub layers: Vec<Dense>,
}

/// Activations recorded by [`MlpModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input of every layer (the raw input first, then post-GELU values).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every hidden layer.
    pre_activations: Vec<Vec<f64>>,
}

impl MlpModel {
    pub fn zeros(layer_dims: &[usize]) -> Result<Self, NnError> {
        Self::build(layer_dims, |i, o| Dense::zeros(i, o))
    }

    pub fn glorot(layer_dims: &[usize], rng: &mut Rng) -> Result<Self, NnError> {
        Self::build(layer_dims, |i, o| Dense::glorot(i, o, rng))
    }

    fn build(layer_dims: &[usize], mut make: impl FnMut(usize, usize) -> Dense) -> Result<Self, NnError> {
        if layer_dims.len() < 2 {
            return Err(NnError::TooFewLayers);
        }
        let layers = layer_dims.windows(2).map(|w| make(w[0], w[1])).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two dims")
    }

    /// True when the layers agree with `layer_dims` and every parameter is
    /// finite.
    pub fn is_consistent(&self) -> bool {
        self.layer_dims.len() == self.layers.len() + 1
            && self.layers.iter().enumerate().all(|(i, l)| {
                l.in_dim == self.layer_dims[i]
                    && l.out_dim == self.layer_dims[i + 1]
                    && l.weights.len() == l.in_dim * l.out_dim
                    && l.bias.len() == l.out_dim
                    && l.weights.iter().chain(&l.bias).all(|v| v.is_finite())
            })
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Logits without recording activations.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = gelu(*v));
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache), NnError> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            inputs.push(h);
            if i < last {
                h = z.iter().map(|&v| gelu(v)).collect();
                pre_activations.push(z);
            } else {
                h = z;
            }
        }
        Ok((
            h,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Result<GradientBundle, NnError> {
        let mut grads = GradientBundle::zeros_like(self);
        self.accumulate_backward(cache, grad_logits, &mut grads)?;
        Ok(grads)
    }

    /// Adds the parameter gradient for one sample into `grads`.
    pub fn accumulate_backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f64],
        grads: &mut GradientBundle,
    ) -> Result<(), NnError> {
        if grad_logits.len() != self.output_dim() {
            return Err(NnError::Dimension {
                expected: self.output_dim(),
                got: grad_logits.len(),
            });
        }
        if cache.inputs.len() != self.layers.len() || !grads.matches(self) {
            return Err(NnError::Shape);
        }
        let mut delta = grad_logits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            if input.len() != layer.in_dim {
                return Err(NnError::Shape);
            }
            let g = &mut grads.layers[l];
            for (gb, &d) in g.bias.iter_mut().zip(&delta) {
                *gb += d;
            }
            for (k, &x) in input.iter().enumerate() {
                if x != 0.0 {
                    let row = &mut g.weights[k * layer.out_dim..(k + 1) * layer.out_dim];
                    for (gw, &d) in row.iter_mut().zip(&delta) {
                        *gw += x * d;
                    }
                }
            }
            if l > 0 {
                let pre = &cache.pre_activations[l - 1];
                delta = (0..layer.in_dim)
                    .map(|k| {
                        let back: f64 = layer.row(k).iter().zip(&delta).map(|(w, d)| w * d).sum();
                        back * gelu_derivative(pre[k])
                    })
                    .collect();
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer (weights, then bias).
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in &mut self.layers {
            if index < layer.weights.len() {
                return &mut layer.weights[index];
            }
            index -= layer.weights.len();
            if index < layer.bias.len() {
                return &mut layer.bias[index];
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-parameter gradients shaped like an [`MlpModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub layers: Vec<LayerGradient>,
}

impl GradientBundle {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn matches(&self, model: &MlpModel) -> bool {
        self.layers.len() == model.layers.len()
            && self
                .layers
                .iter()
                .zip(&model.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        let others = other.flatten();
        self.values_mut().zip(others).for_each(|(a, b)| *a += b);
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|&v| v == 0.0))
    }
}

/// Adam moment estimates for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: GradientBundle,
    pub second_moment: GradientBundle,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(model: &MlpModel) -> Self {
        Self {
            first_moment: GradientBundle::zeros_like(model),
            second_moment: GradientBundle::zeros_like(model),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam descent step, `θ ← θ − lr·m̂/(√v̂ + eps)`.
/// Rejects non-finite gradients before anything is modified.
pub fn adam_step(model: &mut MlpModel, grads: &GradientBundle, state: &mut AdamState, lr: f64) -> Result<(), NnError> {
    if !grads.matches(model) || !state.first_moment.matches(model) || !state.second_moment.matches(model) {
        return Err(NnError::Shape);
    }
    if !grads.is_finite() {
        return Err(NnError::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let g = &grads.layers[l];
        let m = &mut state.first_moment.layers[l];
        let v = &mut state.second_moment.layers[l];
        let sections = [
            (&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights),
            (&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias),
        ];
        for (theta, g, m, v) in sections {
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
