//! SGD with momentum and loss-coupled L2 weight decay, plus the cosine schedule.

use std::collections::HashMap;
use std::f64::consts::PI;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::nn::Param;

#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates every trainable parameter that received a gradient and
    /// returns how many were touched. Parameters without a gradient keep
    /// both their value and their momentum buffer.
    pub fn step(&mut self, params: &[&Param], grads: &GradStore, lr: f64) -> Result<usize> {
        let mut touched = 0;
        for p in params.iter().filter(|p| p.is_trainable()) {
            let Some(g) = grads.get(p.var().as_tensor()) else {
                continue;
            };
            let value = p.value();
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + value.affine(self.weight_decay, 0.0)?)?;
            }
            let v = match self.velocity.get(p.name()) {
                Some(prev) if self.momentum != 0.0 => (prev.affine(self.momentum, 0.0)? + g)?,
                _ => g,
            };
            p.set(&(value - v.affine(lr, 0.0)?)?)?;
            self.velocity.insert(p.name().to_string(), v);
            touched += 1;
        }
        Ok(touched)
    }
}

/// Cosine annealing from `base` at step 0 towards 0 at `total_steps`.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}
