//! Linearized ReLU-kernel attention with optional angle re-weighting.
//!
//! With `phi = ReLU` and the per-token angle expansion `E`, each output row is
//!
//! ```text
//! O_i = E(phi(Q_i)) S / max(E(phi(Q_i)) . z, eps)
//! S   = sum_j E(phi(K_j))^T V_j      (d' x dv)
//! z   = sum_j E(phi(K_j))            (d')
//! ```
//!
//! The key summaries `S` and `z` are accumulated sequentially over `j`, so
//! results are bitwise reproducible for a given input. No `N x N` matrix is
//! ever formed, forward or backward.

use ndarray::{Array1, Array2, ArrayView2};

use super::grid::{angle_encode, sequence_angle, PositionGrid};
use super::mode::AttentionMode;
use crate::error::{shape, Error, Result};
use crate::scalar::Real;

/// Default denominator clamp.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Per-token multipliers of the angle expansion, shape `(N, factor)`.
///
/// Vicinity2D: `[cos a, sin a, cos b, sin b]`; Locality1D: `[cos c, sin c]`;
/// NoLocality: `[1]`.
pub fn expansion_coefficients(grid: &PositionGrid, mode: AttentionMode) -> Result<Array2<f64>> {
    let n = grid.len();
    match mode {
        AttentionMode::Vicinity2D => {
            let angles = angle_encode(grid);
            Ok(Array2::from_shape_fn((n, 4), |(i, k)| match k {
                0 => angles.row[i].cos(),
                1 => angles.row[i].sin(),
                2 => angles.col[i].cos(),
                _ => angles.col[i].sin(),
            }))
        }
        AttentionMode::Locality1D => Ok(Array2::from_shape_fn((n, 2), |(i, k)| {
            let c = sequence_angle(i, n);
            if k == 0 {
                c.cos()
            } else {
                c.sin()
            }
        })),
        AttentionMode::NoLocality => Ok(Array2::ones((n, 1))),
        AttentionMode::SoftmaxOracle => {
            Err(Error::UnsupportedMode(mode, "angle expansion"))
        }
    }
}

/// Expands kernelized features with the per-token angle multipliers.
///
/// Row `i` of the result is the concatenation of `coef[i, k] * x_i` over the
/// expansion blocks `k`, so the output width is `factor * d`.
pub fn expand_with_angles<T: Real>(
    x: ArrayView2<'_, T>,
    grid: &PositionGrid,
    mode: AttentionMode,
) -> Result<Array2<T>> {
    if x.nrows() != grid.len() {
        return Err(shape(format!(
            "{} rows for a {grid} grid of {} tokens",
            x.nrows(),
            grid.len()
        )));
    }
    let coefs = cast(&expansion_coefficients(grid, mode)?);
    Ok(expand(x, &coefs))
}

fn cast<T: Real>(a: &Array2<f64>) -> Array2<T> {
    a.mapv(T::of)
}

fn expand<T: Real>(x: ArrayView2<'_, T>, coefs: &Array2<T>) -> Array2<T> {
    let (n, d) = x.dim();
    let factor = coefs.ncols();
    let mut out = Array2::zeros((n, factor * d));
    for (i, (xi, mut oi)) in x.outer_iter().zip(out.outer_iter_mut()).enumerate() {
        for k in 0..factor {
            let c = coefs[[i, k]];
            for (o, &v) in oi.slice_mut(ndarray::s![k * d..(k + 1) * d]).iter_mut().zip(xi) {
                *o = c * v;
            }
        }
    }
    out
}

/// Adjoint of [`expand`]: folds the expansion blocks back onto `d` channels.
fn fold<T: Real>(dx_expanded: &Array2<T>, coefs: &Array2<T>, d: usize) -> Array2<T> {
    let n = dx_expanded.nrows();
    let factor = coefs.ncols();
    let mut out = Array2::zeros((n, d));
    for (i, (gi, mut oi)) in dx_expanded.outer_iter().zip(out.outer_iter_mut()).enumerate() {
        for k in 0..factor {
            let c = coefs[[i, k]];
            for (o, &g) in oi.iter_mut().zip(gi.slice(ndarray::s![k * d..(k + 1) * d])) {
                *o += c * g;
            }
        }
    }
    out
}

pub(crate) fn relu<T: Real>(x: ArrayView2<'_, T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn check_qkv<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
) -> Result<()> {
    if q.dim() != k.dim() {
        return Err(shape(format!("Q is {:?} but K is {:?}", q.dim(), k.dim())));
    }
    if v.nrows() != q.nrows() {
        return Err(shape(format!(
            "V has {} rows but Q has {}",
            v.nrows(),
            q.nrows()
        )));
    }
    if q.nrows() == 0 || q.ncols() == 0 || v.ncols() == 0 {
        return Err(shape("empty attention operand".to_string()));
    }
    for (name, a) in [("Q", q), ("K", k), ("V", v)] {
        if !a.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(())
}

/// Everything the backward pass needs from a linear attention forward.
#[derive(Clone, Debug)]
pub struct LinearAttentionCache<T> {
    pub(crate) q_in: Array2<T>,
    pub(crate) k_in: Array2<T>,
    pub(crate) v: Array2<T>,
    pub(crate) coefs: Array2<T>,
    pub(crate) q_exp: Array2<T>,
    pub(crate) k_exp: Array2<T>,
    pub(crate) summary: Array2<T>,
    pub(crate) key_sum: Array1<T>,
    /// Unclamped denominators.
    pub(crate) den: Array1<T>,
    pub(crate) out: Array2<T>,
    pub(crate) eps: T,
}

impl<T: Real> LinearAttentionCache<T> {
    pub fn output(&self) -> &Array2<T> {
        &self.out
    }

    /// Pre-activation queries and keys, for kink detection.
    pub fn kernel_inputs(&self) -> [&Array2<T>; 2] {
        [&self.q_in, &self.k_in]
    }

    pub fn denominators(&self) -> &Array1<T> {
        &self.den
    }

    pub fn eps(&self) -> T {
        self.eps
    }
}

/// Linearized attention. `mode` must not be `SoftmaxOracle`.
pub fn linear_attention<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    grid: &PositionGrid,
    mode: AttentionMode,
    eps: T,
) -> Result<Array2<T>> {
    linear_attention_forward(q, k, v, grid, mode, eps).map(|c| c.out)
}

pub fn linear_attention_forward<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    grid: &PositionGrid,
    mode: AttentionMode,
    eps: T,
) -> Result<LinearAttentionCache<T>> {
    if !mode.is_linear() {
        return Err(Error::UnsupportedMode(mode, "linear attention"));
    }
    check_qkv(q, k, v)?;
    if !(eps > T::zero()) {
        return Err(crate::error::domain("eps must be positive"));
    }
    if q.nrows() != grid.len() {
        return Err(shape(format!(
            "sequence of {} tokens does not match grid {grid}",
            q.nrows()
        )));
    }
    let coefs: Array2<T> = cast(&expansion_coefficients(grid, mode)?);
    let q_exp = expand(relu(q).view(), &coefs);
    let k_exp = expand(relu(k).view(), &coefs);

    let width = k_exp.ncols();
    let dv = v.ncols();
    let mut summary = Array2::<T>::zeros((width, dv));
    let mut key_sum = Array1::<T>::zeros(width);
    for (kj, vj) in k_exp.outer_iter().zip(v.outer_iter()) {
        for (p, &kp) in kj.iter().enumerate() {
            if kp != T::zero() {
                summary.row_mut(p).scaled_add(kp, &vj);
            }
        }
        key_sum += &kj;
    }

    let mut out = q_exp.dot(&summary);
    let den = q_exp.dot(&key_sum);
    for (mut row, &d) in out.outer_iter_mut().zip(den.iter()) {
        let d = d.max(eps);
        row.mapv_inplace(|x| x / d);
    }

    Ok(LinearAttentionCache {
        q_in: q.to_owned(),
        k_in: k.to_owned(),
        v: v.to_owned(),
        coefs,
        q_exp,
        k_exp,
        summary,
        key_sum,
        den,
        out,
        eps,
    })
}

/// Gradients with respect to `(Q, K, V)` given the upstream gradient of the
/// output.
pub fn linear_attention_backward<T: Real>(
    cache: &LinearAttentionCache<T>,
    d_out: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    backward_impl(cache, d_out, false)
}

/// `drop_normalizer` removes the gradient flowing through the denominator.
/// Only the negative-control check uses it.
pub(crate) fn backward_impl<T: Real>(
    c: &LinearAttentionCache<T>,
    d_out: ArrayView2<'_, T>,
    drop_normalizer: bool,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let d = c.q_in.ncols();
    let mut d_num = d_out.to_owned();
    let mut d_den = Array1::<T>::zeros(c.den.len());
    for (i, mut row) in d_num.outer_iter_mut().enumerate() {
        let den = c.den[i];
        let clamped = den.max(c.eps);
        // d/d(den) of num / den is -(dO . O) / den; zero on the clamped branch.
        if den >= c.eps && !drop_normalizer {
            let dot: T = row.iter().zip(c.out.row(i)).map(|(&g, &o)| g * o).sum();
            d_den[i] = -dot / clamped;
        }
        row.mapv_inplace(|g| g / clamped);
    }

    let mut dq_exp = d_num.dot(&c.summary.t());
    for (mut row, &g) in dq_exp.outer_iter_mut().zip(d_den.iter()) {
        row.scaled_add(g, &c.key_sum);
    }
    let d_summary = c.q_exp.t().dot(&d_num);
    let d_key_sum = c.q_exp.t().dot(&d_den);

    let mut dk_exp = c.v.dot(&d_summary.t());
    for mut row in dk_exp.outer_iter_mut() {
        row += &d_key_sum;
    }
    let dv = c.k_exp.dot(&d_summary);

    let mut dq = fold(&dq_exp, &c.coefs, d);
    let mut dk = fold(&dk_exp, &c.coefs, d);
    relu_backward(&mut dq, &c.q_in);
    relu_backward(&mut dk, &c.k_in);
    (dq, dk, dv)
}

pub(crate) fn relu_backward<T: Real>(grad: &mut Array2<T>, input: &Array2<T>) {
    ndarray::Zip::from(grad).and(input).for_each(|g, &x| {
        if x <= T::zero() {
            *g = T::zero();
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn expand_zero_angle() {
        let g = PositionGrid::new(1, 1).unwrap();
        let x = array![[1.0, 2.0]];
        let e = expand_with_angles(x.view(), &g, AttentionMode::Vicinity2D).unwrap();
        assert_eq!(e, array![[1.0, 2.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0]]);
    }

    #[test]
    fn expand_no_locality_is_identity() {
        let g = PositionGrid::new(2, 3).unwrap();
        let x = Array2::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f64 * 0.37 - 1.0);
        let e = expand_with_angles(x.view(), &g, AttentionMode::NoLocality).unwrap();
        assert_eq!(e, x);
    }

    #[test]
    fn expand_widths() {
        let g = PositionGrid::new(2, 2).unwrap();
        let x = Array2::<f64>::ones((4, 5));
        assert_eq!(
            expand_with_angles(x.view(), &g, AttentionMode::Vicinity2D).unwrap().ncols(),
            20
        );
        assert_eq!(
            expand_with_angles(x.view(), &g, AttentionMode::Locality1D).unwrap().ncols(),
            10
        );
        assert!(matches!(
            expand_with_angles(x.view(), &g, AttentionMode::SoftmaxOracle),
            Err(Error::UnsupportedMode(..))
        ));
    }

    #[test]
    fn expand_preserves_row_norm_per_angle_pair() {
        let g = PositionGrid::new(2, 2).unwrap();
        let x = array![[0.3, 1.2, 0.0], [2.0, 0.1, 0.4], [0.9, 0.9, 0.9], [0.0, 3.0, 1.0]];
        let e = expand_with_angles(x.view(), &g, AttentionMode::Vicinity2D).unwrap();
        for i in 0..4 {
            let norm = |range: std::ops::Range<usize>| -> f64 {
                e.row(i).slice(ndarray::s![range]).iter().map(|v| v * v).sum()
            };
            let xi: f64 = x.row(i).iter().map(|v| v * v).sum();
            assert!((norm(0..3) + norm(3..6) - xi).abs() < 1e-12);
            assert!((norm(6..9) + norm(9..12) - xi).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_returns_value_row() {
        let g = PositionGrid::new(1, 1).unwrap();
        let q = array![[0.5f64, -1.0, 2.0]];
        let k = array![[1.5, 0.2, 0.1]];
        let v = array![[3.0, -4.0]];
        for mode in AttentionMode::LINEAR {
            let o = linear_attention(q.view(), k.view(), v.view(), &g, mode, 1e-6).unwrap();
            assert!((o[[0, 0]] - 3.0).abs() < 1e-14);
            assert!((o[[0, 1]] + 4.0).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_queries_give_zero_output() {
        let g = PositionGrid::new(2, 2).unwrap();
        let q = Array2::<f64>::zeros((4, 3));
        let k = Array2::from_shape_fn((4, 3), |(i, j)| 1.0 + (i + j) as f64);
        let v = Array2::from_shape_fn((4, 2), |(i, j)| (i as f64) - (j as f64));
        let o = linear_attention(q.view(), k.view(), v.view(), &g, AttentionMode::Vicinity2D, 1e-6)
            .unwrap();
        assert!(o.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = PositionGrid::new(2, 2).unwrap();
        let a = Array2::<f64>::ones((4, 3));
        let b = Array2::<f64>::ones((4, 2));
        let m = AttentionMode::Vicinity2D;
        assert!(matches!(
            linear_attention(a.view(), b.view(), a.view(), &g, m, 1e-6),
            Err(Error::Shape(_))
        ));
        let g3 = PositionGrid::new(3, 3).unwrap();
        assert!(matches!(
            linear_attention(a.view(), a.view(), a.view(), &g3, m, 1e-6),
            Err(Error::Shape(_))
        ));
        let mut nan = a.clone();
        nan[[1, 1]] = f64::INFINITY;
        assert!(matches!(
            linear_attention(nan.view(), a.view(), a.view(), &g, m, 1e-6),
            Err(Error::NonFinite("Q"))
        ));
        assert!(matches!(
            linear_attention(a.view(), a.view(), a.view(), &g, AttentionMode::SoftmaxOracle, 1e-6),
            Err(Error::UnsupportedMode(..))
        ));
    }
}
