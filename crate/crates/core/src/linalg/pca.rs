use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::matrix::{dot, Matrix};
use crate::linalg::svd::svd;
use crate::scalar::Scalar;

/// A fitted principal-component projector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Pca<T> {
    pub mean: Vec<T>,
    /// `k × d`, orthonormal rows.
    pub components: Matrix<T>,
    pub explained_variance: Vec<T>,
    pub explained_variance_ratio: Vec<T>,
}

impl<T: Scalar> Pca<T> {
    pub fn n_components(&self) -> usize {
        self.components.rows()
    }

    pub fn transform_row(&self, x: &[T]) -> Vec<T> {
        let centered: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &m)| a - m).collect();
        self.components
            .iter_rows()
            .map(|c| dot(c, &centered))
            .collect()
    }

    pub fn transform(&self, x: &Matrix<T>) -> Matrix<T> {
        let rows: Vec<Vec<T>> = x.iter_rows().map(|r| self.transform_row(r)).collect();
        Matrix::from_rows(&rows).expect("uniform rows")
    }

    pub fn total_ratio(&self) -> T {
        self.explained_variance_ratio.iter().copied().sum()
    }
}

pub fn pca<T: Scalar>(x: &Matrix<T>, k: usize) -> Result<Pca<T>> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "pca needs at least 2 rows, got {n}"
        )));
    }
    let max_k = (n - 1).min(d);
    if k == 0 || k > max_k {
        return Err(Error::InvalidArgument(format!(
            "pca: k = {k} outside 1..={max_k} for {n}x{d} data"
        )));
    }
    x.ensure_finite("pca input")?;
    let (xc, mean) = x.centered();
    let dec = svd(&xc)?;
    let total: T = dec.s.iter().map(|&s| s * s).sum();
    let denom = T::of((n - 1) as f64);
    let components = Matrix::from_fn(k, d, |i, j| dec.v[(j, i)]);
    let explained_variance = dec.s[..k].iter().map(|&s| s * s / denom).collect();
    let explained_variance_ratio = dec.s[..k]
        .iter()
        .map(|&s| {
            if total > T::zero() {
                s * s / total
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        explained_variance,
        explained_variance_ratio,
    })
}
