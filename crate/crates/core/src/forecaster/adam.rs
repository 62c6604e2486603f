//! Bias-corrected ADAM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, hyper: AdamHyper) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, state of {}",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - hyper.beta1.powf(state.t as f64);
    let c2 = 1.0 - hyper.beta2.powf(state.t as f64);
    for j in 0..params.len() {
        let g = grad[j];
        state.m[j] = hyper.beta1 * state.m[j] + (1.0 - hyper.beta1) * g;
        state.v[j] = hyper.beta2 * state.v[j] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[j] / c1;
        let v_hat = state.v[j] / c2;
        params[j] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}
