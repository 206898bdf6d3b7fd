//! AdamW (decoupled weight decay) over flat parameter tensors.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::math::sqrt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip, `None` to disable.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: Some(5.0),
        }
    }
}

/// One tensor's update request: parameters, gradient, learning rate.
pub struct ParamGroup<'a> {
    pub params: &'a mut [f64],
    pub grads: &'a [f64],
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update. Groups must arrive in the same order every call.
    pub fn step(&mut self, groups: &mut [ParamGroup<'_>]) {
        if self.moments.is_empty() {
            self.moments = groups
                .iter()
                .map(|g| (vec![0.0; g.params.len()], vec![0.0; g.params.len()]))
                .collect();
        }
        assert_eq!(self.moments.len(), groups.len(), "parameter groups changed");
        let clip = self.config.max_grad_norm.map_or(1.0, |max| {
            let norm = sqrt(
                groups
                    .iter()
                    .flat_map(|g| g.grads.iter())
                    .map(|v| v * v)
                    .sum::<f64>(),
            );
            if norm > max {
                max / norm
            } else {
                1.0
            }
        });
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, f64::from(self.step));
        let bc2 = 1.0 - libm::pow(c.beta2, f64::from(self.step));
        for (g, (m, v)) in groups.iter_mut().zip(self.moments.iter_mut()) {
            assert_eq!(g.params.len(), m.len(), "parameter shape changed");
            for i in 0..g.params.len() {
                let grad = g.grads[i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad * grad;
                let update = (m[i] / bc1) / (sqrt(v[i] / bc2) + c.eps);
                g.params[i] -= g.lr * (update + c.weight_decay * g.params[i]);
            }
        }
    }
}
