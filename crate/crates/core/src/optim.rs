//! Adam with L2 regularization folded into the gradient, and global-norm
//! gradient clipping.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{powi, sqrt};
use crate::numeric::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Coefficient of the `l2 · θ` term added to each gradient.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.l2 >= 0.0
            && self.l2.is_finite();
        if !ok {
            return Err(Error::Config(alloc::format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments for every parameter tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            first: params.iter().map(|t| t.zeros_like()).collect(),
            second: params.iter().map(|t| t.zeros_like()).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    config.validate()?;
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::dim(alloc::format!(
            "{} parameter tensors, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        p.same_shape(g)?;
        p.same_shape(m)?;
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - powi(config.beta1, t);
    let c2 = 1.0 - powi(config.beta2, t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] + config.l2 * *theta;
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *theta -= config.learning_rate * m_hat / (sqrt(v_hat) + config.epsilon);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[&Tensor]) -> f64 {
    sqrt(grads.iter().map(|g| g.norm_sq()).sum())
}

/// Rescales `grads` so their joint norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = sqrt(grads.iter().map(|g| g.norm_sq()).sum());
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}
