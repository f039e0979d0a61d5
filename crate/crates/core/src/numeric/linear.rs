use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::tensor::{matvec, matvec_t_acc, outer_acc, Tensor};
use crate::error::{Error, Result};

/// Affine layer `y = W x + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Input seen by the forward pass; all the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCache {
    pub input: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(input: usize, output: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::uniform(&[output, input], -scale, scale, rng),
            bias: Tensor::uniform(&[output], -scale, scale, rng),
        }
    }

    pub fn input_size(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_size(&self) -> usize {
        self.weight.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.shape().len() != 2 || self.bias.shape() != [self.weight.rows()] {
            return Err(Error::dim(alloc::format!(
                "linear weight {:?} incompatible with bias {:?}",
                self.weight.shape(),
                self.bias.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn apply(&self, x: &[f64], out: &mut [f64]) {
        matvec(&self.weight, x, out);
        for (o, b) in out.iter_mut().zip(self.bias.data()) {
            *o += b;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, LinearCache)> {
        if x.len() != self.input_size() {
            return Err(Error::dim(alloc::format!(
                "linear layer expects input of size {}, got {}",
                self.input_size(),
                x.len()
            )));
        }
        let mut y = vec![0.0; self.output_size()];
        self.apply(x, &mut y);
        Ok((
            y,
            LinearCache {
                input: x.to_vec(),
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns `Wᵀ dy`.
    pub fn backward(&self, cache: &LinearCache, dy: &[f64], grads: &mut Linear) -> Result<Vec<f64>> {
        if dy.len() != self.output_size() || cache.input.len() != self.input_size() {
            return Err(Error::dim("linear backward: gradient or cache has the wrong size"));
        }
        let mut dx = vec![0.0; self.input_size()];
        self.backward_into(&cache.input, dy, grads, &mut dx);
        Ok(dx)
    }

    /// `dx += Wᵀ dy`, `dW += dy xᵀ`, `db += dy`.
    pub(crate) fn backward_into(&self, x: &[f64], dy: &[f64], grads: &mut Linear, dx: &mut [f64]) {
        outer_acc(&mut grads.weight, dy, x);
        for (g, d) in grads.bias.data_mut().iter_mut().zip(dy) {
            *g += d;
        }
        matvec_t_acc(&self.weight, dy, dx);
    }
}
