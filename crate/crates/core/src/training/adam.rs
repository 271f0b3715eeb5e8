use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over the trainable parameters of a store; moments are kept per parameter index.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0 && (0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2) && cfg.eps > 0.0) {
            return Err(Error::config(format!("invalid Adam settings {cfg:?}")));
        }
        Ok(Adam {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Frozen parameters and
    /// parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        if self.m.len() < ids.len() {
            self.m.resize(ids.len(), Vec::new());
            self.v.resize(ids.len(), Vec::new());
        }
        for id in ids {
            let param = store.get_mut(id);
            if !param.requires_grad() {
                continue;
            }
            let Some(g) = param.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            if m.is_empty() {
                *m = vec![0.0; g.len()];
                *v = vec![0.0; g.len()];
            }
            for (((x, gi), mi), vi) in param.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
    }
}
