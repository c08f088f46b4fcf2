use alloc::vec::Vec;

use crate::autodiff::Variable;
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are matched to parameters by
/// position, so callers must pass parameters in a stable order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients, skipping frozen
    /// parameters.
    pub fn update(&mut self, params: Vec<&mut Variable>) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Config("optimizer parameter count changed".into()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - math::powf(beta1, self.step as f64);
        let c2 = 1.0 - math::powf(beta2, self.step as f64);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad() {
                continue;
            }
            if m.shape() != p.value().shape() {
                return Err(m.mismatch("adam", p.value()));
            }
            let (value, grad) = p.parts_mut();
            for (((w, g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                *w -= lr * (*mi / c1) / (math::sqrt(*vi / c2) + eps);
            }
        }
        Ok(())
    }
}
