//! Angle encoding, linearized vicinity attention and its quadratic oracles.

mod grid;
mod linear;
mod mode;
mod oracle;
mod softmax;

pub use grid::{
    angle_encode, reweight_factor, sequence_angle, sequence_reweight_factor, AngleCodes,
    PositionGrid, TokenGrid,
};
pub use linear::{
    expand_with_angles, expansion_coefficients, linear_attention, linear_attention_backward,
    linear_attention_forward, LinearAttentionCache, DEFAULT_EPS,
};
pub use mode::{AttentionMode, ParseModeError};
pub use oracle::{locality_weight, quadratic_oracle, quadratic_oracle_weights, QUADRATIC_CAP};
pub use softmax::{
    softmax_attention, softmax_attention_backward, softmax_attention_forward, softmax_weights,
    SoftmaxCache,
};

use ndarray::{Array2, ArrayView2};

use crate::error::Result;
use crate::scalar::Real;

/// Forward state of whichever attention a mode selects.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum AttentionCache<T> {
    Linear(LinearAttentionCache<T>),
    Softmax(SoftmaxCache<T>),
}

impl<T: Real> AttentionCache<T> {
    pub fn output(&self) -> &Array2<T> {
        match self {
            AttentionCache::Linear(c) => c.output(),
            AttentionCache::Softmax(c) => c.output(),
        }
    }

    /// Smallest `|x|` over all ReLU inputs, `None` for softmax.
    pub fn min_kernel_input(&self) -> Option<T> {
        match self {
            AttentionCache::Linear(c) => Some(
                c.kernel_inputs()
                    .iter()
                    .flat_map(|a| a.iter())
                    .fold(T::infinity(), |m, &x| m.min(x.abs())),
            ),
            AttentionCache::Softmax(_) => None,
        }
    }
}

/// Runs the attention selected by `mode`, keeping what the backward pass needs.
pub fn attention_forward<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    grid: &PositionGrid,
    mode: AttentionMode,
    eps: T,
) -> Result<AttentionCache<T>> {
    if mode.is_linear() {
        linear_attention_forward(q, k, v, grid, mode, eps).map(AttentionCache::Linear)
    } else {
        softmax_attention_forward(q, k, v).map(AttentionCache::Softmax)
    }
}

pub fn attention_backward<T: Real>(
    cache: &AttentionCache<T>,
    d_out: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    attention_backward_impl(cache, d_out, false)
}

pub(crate) fn attention_backward_impl<T: Real>(
    cache: &AttentionCache<T>,
    d_out: ArrayView2<'_, T>,
    drop_normalizer: bool,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    match cache {
        AttentionCache::Linear(c) => linear::backward_impl(c, d_out, drop_normalizer),
        AttentionCache::Softmax(c) => softmax_attention_backward(c, d_out),
    }
}
