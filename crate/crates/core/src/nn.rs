//! Single affine layers with hand-written backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weight: vec![T::zero(); inputs * outputs], bias: vec![T::zero(); outputs] }
    }

    /// Gaussian weights with the given standard deviation, zero bias.
    pub fn random(inputs: usize, outputs: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut l = Self::zeros(inputs, outputs);
        for w in &mut l.weight {
            *w = T::lit(std * standard_normal(rng));
        }
        l
    }

    pub fn with_bias(mut self, bias: &[f64]) -> Self {
        for (b, v) in self.bias.iter_mut().zip(bias) {
            *b = T::lit(*v);
        }
        self
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.inputs {
            return Err(Error::DimensionMismatch { expected: self.inputs, got: x.len() });
        }
        Ok(self.forward_unchecked(x))
    }

    pub fn forward_unchecked(&self, x: &[T]) -> Vec<T> {
        let mut y = self.bias.clone();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = T::zero();
            for (w, xi) in row.iter().zip(x) {
                acc += *w * *xi;
            }
            *yo += acc;
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[T], gy: &[T], grad: &mut Linear<T>) -> Vec<T> {
        let mut gx = vec![T::zero(); self.inputs];
        for (o, g) in gy.iter().enumerate() {
            if *g == T::zero() {
                continue;
            }
            grad.bias[o] += *g;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += *g * x[i];
                gx[i] += *g * row[i];
            }
        }
        gx
    }

    pub fn zero_like(&self) -> Self {
        Self::zeros(self.inputs, self.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Weights then bias, the order used by optimizers and serialization.
    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.weight.iter().chain(self.bias.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            inputs: self.inputs,
            outputs: self.outputs,
            weight: crate::scalar::cast_vec(&self.weight),
            bias: crate::scalar::cast_vec(&self.bias),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|x| x.is_finite())
    }
}

/// Standard normal sample by Box-Muller.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
