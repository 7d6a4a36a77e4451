use serde::{Deserialize, Serialize};

use super::tensor::ParamStore;
use super::AutodiffError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            config,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }
}

/// One bias-corrected Adam update over every parameter in `params`.
/// Gradients are zeroed afterwards. Fails without touching anything if a
/// parameter has no gradient.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<(), AutodiffError> {
    if state.m.len() != params.len() {
        return Err(AutodiffError::InvalidArgument {
            kind: "adam_step",
            reason: format!(
                "optimiser tracks {} parameters, store has {}",
                state.m.len(),
                params.len()
            ),
        });
    }
    if let Some((_, name, _)) = params.iter().find(|(_, _, t)| t.grad().is_none()) {
        return Err(AutodiffError::MissingGrad(name.to_string()));
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (i, (_, tensor)) in params.tensors_mut().enumerate() {
        let grad = tensor.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in tensor.values_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        tensor.zero_grad();
    }
    Ok(())
}
