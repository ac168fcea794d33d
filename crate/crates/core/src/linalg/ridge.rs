use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::matrix::Matrix;
use crate::linalg::svd::svd;
use crate::scalar::Scalar;

/// Affine least-squares map `y ≈ x W + b` with Tikhonov penalty `λ‖W‖²`.
///
/// `weight` is `d_in × d_out` so that inputs are row vectors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RidgeFit<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub lambda: f64,
    pub n_samples: usize,
}

impl<T: Scalar> RidgeFit<T> {
    pub fn predict_row(&self, x: &[T]) -> Vec<T> {
        let mut y = self.weight.vecmat(x).expect("input width matches fit");
        for (v, &b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        y
    }

    pub fn predict(&self, x: &Matrix<T>) -> Matrix<T> {
        let rows: Vec<Vec<T>> = x.iter_rows().map(|r| self.predict_row(r)).collect();
        Matrix::from_rows(&rows).expect("uniform rows")
    }
}

/// Centered ridge regression through the thin SVD of the centered inputs:
/// `W = V diag(s / (s² + λ)) Uᵀ Y_c`, `b = ȳ − x̄ W`.
///
/// Singular values with `s² + λ == 0` contribute nothing (pseudo-inverse).
pub fn ridge_fit<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>, lambda: f64) -> Result<RidgeFit<T>> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "ridge_fit needs at least 2 samples, got {n}"
        )));
    }
    if y.rows() != n {
        return Err(Error::Shape(format!(
            "X has {n} rows but Y has {}",
            y.rows()
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    x.ensure_finite("ridge inputs")?;
    y.ensure_finite("ridge targets")?;

    let (xc, x_mean) = x.centered();
    let (yc, y_mean) = y.centered();
    let dec = svd(&xc)?;
    let lam = T::of(lambda);

    // Uᵀ Y_c scaled row-wise by the filter factors, then V times that.
    let k = dec.s.len();
    let d_out = y.cols();
    let mut filtered = Matrix::<T>::zeros(k, d_out);
    for j in 0..k {
        let s = dec.s[j];
        let denom = s * s + lam;
        if denom == T::zero() {
            continue;
        }
        let f = s / denom;
        if f == T::zero() {
            continue;
        }
        let row = filtered.row_mut(j);
        for i in 0..n {
            let u = dec.u[(i, j)];
            if u == T::zero() {
                continue;
            }
            for (r, &yv) in row.iter_mut().zip(yc.row(i)) {
                *r += u * yv;
            }
        }
        for r in row.iter_mut() {
            *r *= f;
        }
    }
    let weight = dec.v.matmul(&filtered)?;
    let xw = weight.vecmat(&x_mean)?;
    let bias = y_mean.iter().zip(&xw).map(|(&m, &p)| m - p).collect();
    Ok(RidgeFit {
        weight,
        bias,
        lambda,
        n_samples: n,
    })
}
