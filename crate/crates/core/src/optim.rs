//! AdamW with decoupled weight decay and bias correction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// First and second moments for each trainable parameter, created lazily.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> usize {
        self.state.len()
    }

    /// Updates every trainable parameter in `store` from its accumulated
    /// gradient, then clears the gradients. A trainable parameter without a
    /// gradient is an error unless `allow_missing` is set.
    pub fn step(&mut self, store: &mut ParamStore, allow_missing: bool) -> Result<()> {
        let c = self.config;
        if !(c.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", c.lr)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.take() else {
                if allow_missing {
                    continue;
                }
                return Err(Error::invalid(format!("trainable parameter `{}` has no gradient", p.name)));
            };
            let mom = self.state.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(grad.shape().to_vec()),
                v: Tensor::zeros(grad.shape().to_vec()),
            });
            let w = p.value.data_mut();
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for i in 0..w.len() {
                let g = grad.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
        }
        Ok(())
    }
}
