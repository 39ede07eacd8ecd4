use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderParams, ParamGradients, TENSOR_NAMES};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(&'static str),
    #[error("gradient or optimizer state shapes do not match the parameters")]
    ShapeMismatch,
}

/// Adam moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. A positive `weight_decay` applies
/// decoupled decay (AdamW).
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &ParamGradients,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), OptimError> {
    if !grads.is_compatible(params)
        || state.m.iter().zip(params.tensors()).any(|(m, p)| m.len() != p.len())
    {
        return Err(OptimError::ShapeMismatch);
    }
    for (name, g) in TENSOR_NAMES.iter().zip(grads.tensors()) {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(OptimError::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let mut tensors = params.tensors_mut();
    for (k, p) in tensors.iter_mut().enumerate() {
        let g = &grads.tensors()[k];
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for i in 0..p.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            if m[i] == 0.0 && weight_decay == 0.0 {
                continue;
            }
            let x = f64::from(p[i]);
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + EPSILON) + weight_decay * x;
            p[i] = (x - lr * update) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Fixed { lr: f64 },
    /// Decays from `lr` to zero over `total` steps.
    Linear { lr: f64, total: u64 },
}

pub fn lr_at(step: u64, schedule: &Schedule) -> f64 {
    match *schedule {
        Schedule::Fixed { lr } => lr,
        Schedule::Linear { lr, total } => {
            if total == 0 || step >= total {
                0.0
            } else {
                lr * (1.0 - step as f64 / total as f64)
            }
        }
    }
}
