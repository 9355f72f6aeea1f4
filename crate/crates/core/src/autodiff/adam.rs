use serde::{Deserialize, Serialize};

use super::{LayerParams, NnError, Result};

/// Adam optimizer state. Moments are kept per parameter tensor, in the
/// order `layer[0].weights, layer[0].bias, layer[1].weights, ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(skip)]
    m: Vec<Vec<f64>>,
    #[serde(skip)]
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { step_count: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new() }
    }

    fn ensure_moments(&mut self, sizes: &[usize]) {
        if self.m.len() != sizes.len() || self.m.iter().zip(sizes).any(|(m, &s)| m.len() != s) {
            self.m = sizes.iter().map(|&s| vec![0.0; s]).collect();
            self.v = self.m.clone();
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.01)
    }
}

/// One bias-corrected Adam update over every layer, followed by constraint
/// projection. Gradients are consumed (reset to `None`).
pub fn adam_step(layers: &mut [&mut LayerParams], state: &mut AdamState) -> Result<()> {
    let tensors: Vec<_> = layers.iter().flat_map(|l| [&l.weights, &l.bias]).collect();
    if let Some(i) = tensors.iter().position(|t| t.requires_grad && t.grad.is_none()) {
        return Err(NnError::MissingGrad(i));
    }
    let sizes: Vec<usize> = tensors.iter().map(|t| t.numel()).collect();
    state.ensure_moments(&sizes);
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut slot = 0;
    for layer in layers.iter_mut() {
        for tensor in [&mut layer.weights, &mut layer.bias] {
            if let Some(grad) = tensor.grad.take() {
                let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
                for (((p, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = state.beta1 * *m + (1.0 - state.beta1) * g;
                    *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
                }
            }
            slot += 1;
        }
        layer.project();
    }
    Ok(())
}
