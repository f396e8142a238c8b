use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam hyperparameters. Defaults are the standard lr 1e-3, beta1 0.9,
/// beta2 0.999, eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, ..AdamParams::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bad.push("lr");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            bad.push("beta1");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            bad.push("beta2");
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            bad.push("eps");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("adam parameters out of range: {}", bad.join(", "))))
        }
    }
}

/// First/second moment estimates for one parameter tensor. The step counter
/// is per-tensor and drives bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState { m: vec![0.0; numel], v: vec![0.0; numel], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update, in place on `data`.
pub fn adam_step(
    params: &AdamParams,
    state: &mut AdamState,
    data: &mut [f64],
    grad: &[f64],
) -> Result<()> {
    if data.len() != state.m.len() || grad.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam_step: state {} / data {} / grad {} lengths differ",
            state.m.len(),
            data.len(),
            grad.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - params.beta1.powi(state.t as i32);
    let bc2 = 1.0 - params.beta2.powi(state.t as i32);
    for i in 0..data.len() {
        let g = grad[i];
        state.m[i] = params.beta1 * state.m[i] + (1.0 - params.beta1) * g;
        state.v[i] = params.beta2 * state.v[i] + (1.0 - params.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        data[i] -= params.lr * mhat / (vhat.sqrt() + params.eps);
    }
    Ok(())
}
