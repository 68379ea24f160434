//! Named traversal over learnable tensors.
//!
//! Every parameter container exposes its tensors as flat, row-major slices in
//! a fixed order. Optimizers, checkpoints and gradient accumulation are all
//! written against this view, so gradients use the same container types as
//! the parameters they belong to.

use crate::scalar::Real;

pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct TensorMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

pub trait ParamSet<T: Real>: Clone {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>);

    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// A container with the same layout, every element zero.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(T::zero());
        }
        z
    }

    /// Elementwise `self += other`; both must share a layout.
    fn accumulate(&mut self, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += *s;
            }
        }
    }

    fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for v in t.data.iter_mut() {
                *v *= factor;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Pushes an owned ndarray as a named tensor.
macro_rules! push_array {
    ($out:expr, $prefix:expr, $name:expr, $arr:expr) => {
        $out.push($crate::params::TensorRef {
            name: $crate::params::join($prefix, $name),
            shape: $arr.shape().to_vec(),
            data: $arr.as_slice().expect("parameters are contiguous"),
        })
    };
}

macro_rules! push_array_mut {
    ($out:expr, $prefix:expr, $name:expr, $arr:expr) => {
        $out.push($crate::params::TensorMut {
            name: $crate::params::join($prefix, $name),
            shape: $arr.shape().to_vec(),
            data: $arr.as_slice_mut().expect("parameters are contiguous"),
        })
    };
}

pub(crate) use {push_array, push_array_mut};

impl<T: Real, P: ParamSet<T>> ParamSet<T> for Vec<P> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        for (i, p) in self.iter().enumerate() {
            p.collect(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        for (i, p) in self.iter_mut().enumerate() {
            p.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}
