//! AdamW over flattened parameter vectors.

use serde::{Deserialize, Serialize};

use crate::model::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    /// One decoupled-weight-decay Adam update with learning rate `lr`.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let mut theta = params.flatten();
        let g = grads.flatten();
        assert_eq!(theta.len(), self.m.len(), "optimizer built for another parameter set");
        assert_eq!(g.len(), theta.len());
        self.step += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * theta[i]);
        }
        params.load_flat(&theta);
    }
}
