//! Adam with bias correction.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning rate must be positive");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "betas must lie in [0, 1)");
        ensure!(self.eps > 0.0, "epsilon must be positive");
        Ok(())
    }
}

/// Optimizer state: first and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        })
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>]) -> Result<()> {
        ensure!(
            params.len() == self.m.len() && grads.len() == self.m.len(),
            "optimizer tracks {} tensors, got {} parameters and {} gradients",
            self.m.len(),
            params.len(),
            grads.len()
        );
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            ensure!(p.len() == m.len() && g.len() == m.len(), "parameter and gradient sizes differ from optimizer state");
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - Float::powi(c.beta1, t);
        let bc2 = 1.0 - Float::powi(c.beta2, t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.learning_rate / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / Float::sqrt(bc2));
        let eps = T::lit(c.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = v.sqrt() * inv_sqrt_bc2 + eps;
                *w -= step_size * *m / denom;
            }
        }
        Ok(())
    }
}
