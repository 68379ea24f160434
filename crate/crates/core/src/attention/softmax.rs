//! Standard scaled dot-product attention, the quadratic reference mode.

use ndarray::{Array2, ArrayView2};

use super::linear::check_qkv;
use super::oracle::check_cap;
use crate::error::Result;
use crate::scalar::Real;

/// Row-wise `softmax(Q K^T / sqrt(d))`.
pub fn softmax_weights<T: Real>(q: ArrayView2<'_, T>, k: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_cap(q.nrows())?;
    let scale = T::one() / T::from_usize(q.ncols()).unwrap().sqrt();
    let mut s = q.dot(&k.t());
    for mut row in s.outer_iter_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        row.mapv_inplace(|x| ((x - max) * scale).exp());
        let total: T = row.iter().copied().sum();
        row.mapv_inplace(|x| x / total);
    }
    Ok(s)
}

#[derive(Clone, Debug)]
pub struct SoftmaxCache<T> {
    pub(crate) q: Array2<T>,
    pub(crate) k: Array2<T>,
    pub(crate) v: Array2<T>,
    pub(crate) weights: Array2<T>,
    pub(crate) out: Array2<T>,
}

impl<T: Real> SoftmaxCache<T> {
    pub fn output(&self) -> &Array2<T> {
        &self.out
    }

    pub fn weights(&self) -> &Array2<T> {
        &self.weights
    }
}

pub fn softmax_attention<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    softmax_attention_forward(q, k, v).map(|c| c.out)
}

pub fn softmax_attention_forward<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
) -> Result<SoftmaxCache<T>> {
    check_qkv(q, k, v)?;
    let weights = softmax_weights(q, k)?;
    let out = weights.dot(&v);
    Ok(SoftmaxCache {
        q: q.to_owned(),
        k: k.to_owned(),
        v: v.to_owned(),
        weights,
        out,
    })
}

pub fn softmax_attention_backward<T: Real>(
    c: &SoftmaxCache<T>,
    d_out: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let scale = T::one() / T::from_usize(c.q.ncols()).unwrap().sqrt();
    let d_weights = d_out.dot(&c.v.t());
    let dv = c.weights.t().dot(&d_out);
    let mut d_scores = d_weights;
    for (mut g, a) in d_scores.outer_iter_mut().zip(c.weights.outer_iter()) {
        let inner: T = g.iter().zip(a.iter()).map(|(&x, &y)| x * y).sum();
        ndarray::Zip::from(&mut g)
            .and(&a)
            .for_each(|x, &p| *x = p * (*x - inner) * scale);
    }
    let dq = d_scores.dot(&c.k);
    let dk = d_scores.t().dot(&c.q);
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_token_returns_value() {
        let o = softmax_attention(array![[0.3, -2.0]].view(), array![[1.0, 1.0]].view(), array![[5.0, 6.0, 7.0]].view())
            .unwrap();
        assert_eq!(o, array![[5.0, 6.0, 7.0]]);
    }

    #[test]
    fn zero_queries_average_values() {
        let q = Array2::<f64>::zeros((3, 2));
        let k = array![[1.0, 2.0], [3.0, -1.0], [0.0, 4.0]];
        let v = array![[1.0, 0.0], [2.0, 3.0], [6.0, -3.0]];
        let o = softmax_attention(q.view(), k.view(), v.view()).unwrap();
        for row in o.outer_iter() {
            assert!((row[0] - 3.0).abs() < 1e-14);
            assert!(row[1].abs() < 1e-14);
        }
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let q = Array2::from_shape_fn((16, 8), |_| rng.random_range(-2.0..2.0));
        let k = Array2::from_shape_fn((16, 8), |_| rng.random_range(-2.0..2.0));
        let a = softmax_weights::<f64>(q.view(), k.view()).unwrap();
        for row in a.outer_iter() {
            assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn refuses_above_cap() {
        let q = Array2::<f32>::zeros((4097, 1));
        assert!(softmax_attention(q.view(), q.view(), q.view()).is_err());
    }
}
