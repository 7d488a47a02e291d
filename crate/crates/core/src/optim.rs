//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored on each parameter.
    /// Parameters without a gradient are treated as having a zero gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (name, t) in store.iter() {
            if let Some(g) = &t.grad {
                if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient in parameter {name} at element {k}")));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((_, t), (m, v)) in store.iter_mut().zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            let grad = t.grad.take();
            let w = t.data_mut();
            for k in 0..w.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[k]);
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                w[k] -= c.learning_rate * c.weight_decay * w[k] + c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
