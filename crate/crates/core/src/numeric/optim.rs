use serde::{Deserialize, Serialize};

use super::ParamStore;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay applied as `p -= lr * wd * p`.
    pub weight_decay: f64,
    /// Global gradient-norm clip applied before the moment update.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// One bias-corrected Adam update over every parameter in the store, then
/// clears the gradient accumulators.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    let scale = match cfg.max_grad_norm {
        Some(max) => {
            let norm = store.grad_norm();
            if norm > max && norm > 0.0 {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in store.params_mut() {
        let n = p.value.len();
        for i in 0..n {
            let g = p.grad.data()[i] * scale;
            let m = cfg.beta1 * p.m.data()[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * p.v.data()[i] + (1.0 - cfg.beta2) * g * g;
            p.m.data_mut()[i] = m;
            p.v.data_mut()[i] = v;
            let mhat = m / bc1;
            let vhat = v / bc2;
            let x = &mut p.value.data_mut()[i];
            *x -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *x);
        }
    }
    store.zero_grads();
}
