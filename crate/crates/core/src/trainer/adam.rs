use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient as `weight_decay · θ`.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Moment buffers, one per parameter tensor, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CoreError::Config(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(CoreError::Config(format!(
                "adam: parameter {i} has shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mk, (&gk, &pk)) in m.iter_mut().zip(g.iter().zip(p.data())) {
            let gk = gk + c.weight_decay * pk;
            *mk = c.beta1 * *mk + (1.0 - c.beta1) * gk;
        }
        let v = state.v[i].data_mut();
        for (vk, (&gk, &pk)) in v.iter_mut().zip(g.iter().zip(p.data())) {
            let gk = gk + c.weight_decay * pk;
            *vk = c.beta2 * *vk + (1.0 - c.beta2) * gk * gk;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (k, pk) in p.data_mut().iter_mut().enumerate() {
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *pk -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}
