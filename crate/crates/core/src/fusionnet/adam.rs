use serde::{Deserialize, Serialize};

use super::{FusionError, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    fn matches<P: Parameters>(&self, params: &P) -> bool {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        self.m.iter().map(Vec::len).eq(shapes.iter().copied())
            && self.v.iter().map(Vec::len).eq(shapes.iter().copied())
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    config: &AdamConfig,
    t: u64,
) -> Result<(), FusionError> {
    if t == 0 {
        return Err(FusionError::InvalidConfig("adam step index must be >= 1".into()));
    }
    if !state.matches(params) || !state.matches(grads) {
        let expected = params.num_values();
        return Err(FusionError::ShapeMismatch { expected, found: grads.num_values() });
    }
    let AdamConfig { learning_rate, beta1, beta2, eps } = *config;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    let grads = grads.tensors();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}
