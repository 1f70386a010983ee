use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moment buffers for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        AdamState { step: 0, v: m.clone(), m }
    }
}

/// One adaptive-moment update with decoupled weight decay on every
/// parameter accepted by `filter` (by name). Accepted parameters must
/// carry a gradient.
pub fn optimizer_step_filtered(
    params: &mut ParamStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
    filter: impl Fn(&str) -> bool,
) -> Result<()> {
    for id in params.ids() {
        if filter(params.name(id)) && params.grad(id).is_none() {
            return Err(Error::MissingGrad(params.name(id).into()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - math::powi(cfg.beta1, t);
    let bc2 = 1.0 - math::powi(cfg.beta2, t);
    for id in params.ids() {
        if !filter(params.name(id)) {
            continue;
        }
        let g = params.grad(id).expect("checked above").data().to_vec();
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let p = params.value_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * cfg.weight_decay * p[i];
            p[i] -= lr * mh / (math::sqrt(vh) + cfg.eps);
        }
    }
    Ok(())
}

pub fn optimizer_step(params: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    optimizer_step_filtered(params, state, cfg, lr, |_| true)
}

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at the final epoch.
pub fn cosine_lr(epoch: usize, epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    if epochs <= 1 {
        return lr_max;
    }
    let t = (epoch.min(epochs - 1)) as f64 / (epochs - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math::cos(PI * t))
}
