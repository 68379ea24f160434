use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::params::{push_array, push_array_mut, ParamSet, TensorMut, TensorRef};
use crate::scalar::Real;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-token layer normalization over the channel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub scale: Array1<T>,
    pub shift: Array1<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            scale: Array1::ones(dim),
            shift: Array1::zeros(dim),
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: ArrayView2<'_, T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::from_usize(x.ncols()).unwrap();
        let eps = T::of(LAYER_NORM_EPS);
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.outer_iter_mut().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            *s = T::one() / (var + eps).sqrt();
            let k = *s;
            row.mapv_inplace(|v| v * k);
        }
        let mut y = &normalized * &self.scale;
        y += &self.shift;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: ArrayView2<'_, T>, grad: &mut Self) -> Array2<T> {
        grad.scale += &(&dy * &cache.normalized).sum_axis(Axis(0));
        grad.shift += &dy.sum_axis(Axis(0));
        let d = T::from_usize(dy.ncols()).unwrap();
        let mut dx = &dy * &self.scale;
        for ((mut g, xhat), &s) in dx
            .outer_iter_mut()
            .zip(cache.normalized.outer_iter())
            .zip(cache.inv_std.iter())
        {
            let mean_g = g.sum() / d;
            let mean_gx = g.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
            ndarray::Zip::from(&mut g)
                .and(&xhat)
                .for_each(|v, &xh| *v = s * (*v - mean_g - xh * mean_gx));
        }
        dx
    }
}

impl<T: Real> ParamSet<T> for LayerNorm<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        push_array!(out, prefix, "scale", self.scale);
        push_array!(out, prefix, "shift", self.shift);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        push_array_mut!(out, prefix, "scale", self.scale);
        push_array_mut!(out, prefix, "shift", self.shift);
    }
}
