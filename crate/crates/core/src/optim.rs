//! From-scratch SGD and Adam.
//!
//! The training loops here pair Adam on network parameters with plain SGD
//! on the scalar budget, so both are implemented directly over flat f64
//! slices. Updates mutate parameters in place; optimizer state is
//! single-owner and advanced only between steps.

use crate::error::{Result, ShivaError};

/// Plain SGD: param <- param - lr * grad.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub lr: f64,
}

impl SgdState {
    pub fn new(lr: f64) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(ShivaError::invalid(format!("sgd lr must be > 0, got {lr}")));
        }
        Ok(Self { lr })
    }
}

pub fn sgd_step(param: &mut [f64], grad: &[f64], state: &SgdState) -> Result<()> {
    if param.len() != grad.len() {
        return Err(ShivaError::dims(format!(
            "sgd_step: {} params vs {} grads",
            param.len(),
            grad.len()
        )));
    }
    for (p, g) in param.iter_mut().zip(grad) {
        *p -= state.lr * g;
    }
    Ok(())
}

/// Adam hyperparameters. Weight decay applies decoupled (AdamW style) and
/// defaults to zero, which reduces to classic Adam.
#[derive(Debug, Clone)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamParams {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-tensor Adam state: first/second moment buffers and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    hp: &AdamParams,
    state: &mut AdamState,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() {
        return Err(ShivaError::dims(format!(
            "adam_step: {} params, {} grads, {} moments",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        if hp.weight_decay > 0.0 {
            param[i] -= hp.lr * hp.weight_decay * param[i];
        }
    }
    Ok(())
}

/// Linear warmup multiplier: ramps 1/w, 2/w, ..., 1 and stays at 1.
pub fn linear_warmup(step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        1.0
    } else {
        (step + 1) as f64 / warmup_steps as f64
    }
}
