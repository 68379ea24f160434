use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::Distribution;

use super::init::TruncatedNormal;
use crate::params::{push_array, push_array_mut, ParamSet, TensorMut, TensorRef};
use crate::scalar::Real;

/// Affine map `y = x W + b` on row vectors; `weight` is `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    /// Truncated-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        let dist = TruncatedNormal::new(std);
        Self {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || T::of(dist.sample(rng))),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Returns `dx` and adds the parameter gradients into `grad`.
    pub fn backward(&self, x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>, grad: &mut Self) -> Array2<T> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl<T: Real> ParamSet<T> for Linear<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        push_array!(out, prefix, "weight", self.weight);
        push_array!(out, prefix, "bias", self.bias);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        push_array_mut!(out, prefix, "weight", self.weight);
        push_array_mut!(out, prefix, "bias", self.bias);
    }
}
