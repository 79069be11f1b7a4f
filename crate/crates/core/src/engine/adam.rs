use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// One bias-corrected Adam update of every parameter, then zeroes gradients.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    for (_, p) in store.iter_mut() {
        p.t += 1;
        let t = p.t as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let values = p.value.data_mut();
        let grads = p.grad.data();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        for i in 0..values.len() {
            let g = grads[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            values[i] -= (cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
        }
        p.grad.fill(0.0);
    }
}
