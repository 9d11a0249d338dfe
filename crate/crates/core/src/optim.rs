//! Gradient-ascent updates: plain ascent and AdamW.

use serde::{Deserialize, Serialize};

use crate::config::{OptimizerKind, RunConfig};
use crate::error::{Error, Result};
use crate::vecmath::axpy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerSettings {
    pub fn from_config(config: &RunConfig) -> Self {
        OptimizerSettings {
            kind: config.optimizer,
            weight_decay: config.weight_decay,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        }
    }
}

/// Adam moments and step count; unused by plain ascent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One ascent step on `theta` along `grad`. A non-finite gradient leaves
/// both `theta` and `state` untouched.
pub fn update_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    settings: &OptimizerSettings,
) -> Result<()> {
    if grad.len() != theta.len() || state.m.len() != theta.len() {
        return Err(Error::Contract("gradient/parameter length mismatch".into()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient coordinate {i} is {}", grad[i])));
    }
    match settings.kind {
        OptimizerKind::PlainAscent => axpy(theta, lr, grad),
        OptimizerKind::Adamw => {
            state.t += 1;
            let t = state.t as i32;
            let (b1, b2) = (settings.beta1, settings.beta2);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let decay = 1.0 - lr * settings.weight_decay;
            for i in 0..theta.len() {
                let g = grad[i];
                state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
                state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
                let mhat = state.m[i] / c1;
                let vhat = state.v[i] / c2;
                theta[i] = theta[i] * decay + lr * mhat / (vhat.sqrt() + settings.eps);
            }
        }
    }
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(())
}
