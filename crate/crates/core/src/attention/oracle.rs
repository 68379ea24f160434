//! Explicit `N x N` re-weighted attention.
//!
//! Builds every pairwise weight directly from the closed-form locality
//! factor instead of the angle expansion, so it shares no arithmetic with
//! the linearized path beyond the ReLU kernel.

use ndarray::{Array2, ArrayView2};

use super::grid::{reweight_factor, sequence_reweight_factor, PositionGrid};
use super::linear::{check_qkv, relu};
use super::mode::AttentionMode;
use crate::error::{shape, Error, Result};
use crate::scalar::Real;

/// Longest sequence the quadratic paths will materialize.
pub const QUADRATIC_CAP: usize = 4096;

pub(crate) fn check_cap(n: usize) -> Result<()> {
    if n > QUADRATIC_CAP {
        return Err(Error::TooLarge {
            len: n,
            cap: QUADRATIC_CAP,
        });
    }
    Ok(())
}

/// Locality weight between tokens `i` and `j` under a linear mode.
pub fn locality_weight(i: usize, j: usize, grid: &PositionGrid, mode: AttentionMode) -> Result<f64> {
    match mode {
        AttentionMode::Vicinity2D => reweight_factor(i, j, grid),
        AttentionMode::Locality1D => sequence_reweight_factor(i, j, grid.len()),
        AttentionMode::NoLocality => Ok(1.0),
        AttentionMode::SoftmaxOracle => Err(Error::UnsupportedMode(mode, "locality weight")),
    }
}

/// Row-normalized attention matrix of the re-weighted ReLU kernel.
///
/// Rows whose raw mass is below `eps` are divided by `eps`, matching the
/// clamp of the linear path.
pub fn quadratic_oracle_weights<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    grid: &PositionGrid,
    mode: AttentionMode,
    eps: T,
) -> Result<Array2<T>> {
    if q.dim() != k.dim() {
        return Err(shape(format!("Q is {:?} but K is {:?}", q.dim(), k.dim())));
    }
    let n = q.nrows();
    check_cap(n)?;
    if n != grid.len() {
        return Err(shape(format!("sequence of {n} tokens does not match grid {grid}")));
    }
    let qp = relu(q);
    let kp = relu(k);
    let mut w = qp.dot(&kp.t());
    for i in 0..n {
        for j in 0..n {
            w[[i, j]] *= T::of(locality_weight(i, j, grid, mode)?);
        }
    }
    for mut row in w.outer_iter_mut() {
        let total: T = row.iter().copied().sum();
        let den = total.max(eps);
        row.mapv_inplace(|x| x / den);
    }
    Ok(w)
}

pub fn quadratic_oracle<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    grid: &PositionGrid,
    mode: AttentionMode,
    eps: T,
) -> Result<Array2<T>> {
    check_qkv(q, k, v)?;
    let a = quadratic_oracle_weights(q, k, grid, mode, eps)?;
    Ok(a.dot(&v))
}
