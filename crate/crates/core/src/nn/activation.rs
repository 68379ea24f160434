use std::f64::consts::{FRAC_1_SQRT_2, PI};

use ndarray::{ArrayBase, Data, Dimension, Zip};
use ndarray::{Array, ArrayView};

use crate::scalar::Real;

/// Exact (erf-based) GELU: `x * Phi(x)`.
pub fn gelu<T: Real, S: Data<Elem = T>, D: Dimension>(x: &ArrayBase<S, D>) -> Array<T, D> {
    let k = T::of(FRAC_1_SQRT_2);
    let half = T::of(0.5);
    x.mapv(|v| half * v * (T::one() + (v * k).erf()))
}

/// Gradient of [`gelu`] at `input`, chained with `grad`.
pub fn gelu_backward<T: Real, D: Dimension>(
    grad: ArrayView<'_, T, D>,
    input: ArrayView<'_, T, D>,
) -> Array<T, D> {
    let k = T::of(FRAC_1_SQRT_2);
    let half = T::of(0.5);
    let pdf_scale = T::of(1.0 / (2.0 * PI).sqrt());
    let mut out = grad.to_owned();
    Zip::from(&mut out).and(&input).for_each(|g, &x| {
        let cdf = half * (T::one() + (x * k).erf());
        let pdf = pdf_scale * (-half * x * x).exp();
        *g *= cdf + x * pdf ;
    });
    out
}

/// Nonlinearity applied between two linear layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_reference_values() {
        let y = gelu(&array![-1.0f64, 0.0, 1.0, 3.0]);
        // x * Phi(x), from scipy.stats.norm
        assert!((y[0] + 0.15865525393145707).abs() < 1e-12);
        assert_eq!(y[1], 0.0);
        assert!((y[2] - 0.8413447460685429).abs() < 1e-12);
        assert!((y[3] - 2.99595030590511).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        let xs = array![-2.5f64, -0.7, 0.0, 0.3, 1.9];
        let g = gelu_backward(ndarray::Array1::ones(5).view(), xs.view());
        for (i, &x) in xs.iter().enumerate() {
            let h = 1e-6;
            let fd = (gelu(&array![x + h])[0] - gelu(&array![x - h])[0]) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
