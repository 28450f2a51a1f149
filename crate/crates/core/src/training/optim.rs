//! Adam with the amsgrad correction, and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BASE_LR: f64 = 8e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    v_max: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|t| vec![0.0; t.numel()]).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
            v_max: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter from its grad slot; a missing grad counts
    /// as zero. Non-finite gradients abort the whole step untouched.
    pub fn step(&mut self, params: &mut [Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(Error::Shape(format!("parameter {i} changed size")));
            }
            if let Some(g) = p.grad() {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("gradient of parameter {i} is {bad}")));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = lr / bc1;
        let bc2_sqrt = bc2.sqrt();
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().map(<[f64]>::to_vec);
            let (m, v, vm) = (&mut self.m[i], &mut self.v[i], &mut self.v_max[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                vm[j] = vm[j].max(v[j]);
                let denom = vm[j].sqrt() / bc2_sqrt + self.eps;
                data[j] -= step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}

/// `0.5 * base * (1 + cos(pi * step / total))`, clamped to the schedule.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos())
}
