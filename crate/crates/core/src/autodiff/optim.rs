//! Adam without weight decay, and the warmup + cosine learning-rate schedule.

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators for every parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let first: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self { config, second: first.clone(), first, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. All gradients are checked before any
    /// parameter changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::Shape {
                    op: "adam",
                    detail: format!("gradient {:?} for `{}` {:?}", g.shape(), params.name(id), params.get(id).shape()),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from `lr_min` to `lr_max`, then cosine decay back to
/// `lr_min` at `total_iters`.
pub fn lr_at(iteration: usize, warmup_iters: usize, total_iters: usize, lr_min: f64, lr_max: f64) -> Result<f64> {
    if warmup_iters > total_iters {
        return Err(Error::InvalidArgument(format!(
            "warmup {warmup_iters} exceeds total {total_iters} iterations"
        )));
    }
    if iteration < warmup_iters {
        return Ok(lr_min + (lr_max - lr_min) * iteration as f64 / warmup_iters as f64);
    }
    let span = (total_iters - warmup_iters).max(1) as f64;
    let progress = ((iteration - warmup_iters) as f64 / span).min(1.0);
    Ok(lr_min + (lr_max - lr_min) * 0.5 * (1.0 + (PI * progress).cos()))
}
