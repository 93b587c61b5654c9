use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FusionError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) if x < 0.0 => slope * x,
            _ => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) if pre < 0.0 => slope,
            _ => 1.0,
        }
    }
}

/// Fully connected layer `y = act(W x + b)` with `W` stored row-major as
/// `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero bias.
    pub fn uniform<R: Rng>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim, activation);
        if in_dim > 0 {
            let bound = 1.0 / (in_dim as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        layer
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// Returns `(pre_activation, output)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), FusionError> {
        if x.len() != self.in_dim {
            return Err(FusionError::ShapeMismatch { expected: self.in_dim, found: x.len() });
        }
        let n = self.in_dim;
        let pre: Vec<f64> = (0..self.out_dim)
            .map(|o| self.bias[o] + dot(&self.weights[o * n..(o + 1) * n], x))
            .collect();
        let out = pre.iter().map(|&p| self.activation.apply(p)).collect();
        Ok((pre, out))
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the layer input.
    pub fn backward(&self, x: &[f64], pre: &[f64], dout: &[f64], grad: &mut DenseLayer) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let dz = dout[o] * self.activation.derivative(pre[o]);
            grad.bias[o] += dz;
            let row = o * self.in_dim;
            for i in 0..self.in_dim {
                grad.weights[row + i] += dz * x[i];
                dx[i] += dz * self.weights[row + i];
            }
        }
        dx
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stack of dense layers. Hidden layers use leaky ReLU, the last is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn uniform<R: Rng>(widths: &[usize], leaky_slope: f64, rng: &mut R) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Identity } else { Activation::LeakyRelu(leaky_slope) };
                DenseLayer::uniform(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(widths: &[usize], leaky_slope: f64) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::Identity } else { Activation::LeakyRelu(leaky_slope) };
                DenseLayer::zeros(widths[i], widths[i + 1], act)
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache), FusionError> {
        let mut cache = MlpCache { inputs: Vec::with_capacity(self.layers.len()), pre: Vec::with_capacity(self.layers.len()) };
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let (pre, out) = layer.forward(&cur)?;
            cache.inputs.push(cur);
            cache.pre.push(pre);
            cur = out;
        }
        Ok((cur, cache))
    }

    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut d = dout.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            d = layer.backward(&cache.inputs[i], &cache.pre[i], &d, &mut grad.layers[i]);
        }
        d
    }
}
