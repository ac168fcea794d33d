//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! One-sided Jacobi orthogonalizes the columns of `A` directly and keeps
//! small singular values to high relative accuracy, which matters for the
//! badly conditioned activation matrices fed to the ridge solver.

use crate::error::{Error, Result};
use crate::linalg::matrix::{dot, Matrix};
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 80;

/// Result of [`svd`]: `A = U diag(s) V^T` with `U` m×k, `V` n×k, `k = min(m, n)`.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    pub u: Matrix<T>,
    pub s: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> Svd<T> {
    pub fn reconstruct(&self) -> Matrix<T> {
        let k = self.s.len();
        let us = Matrix::from_fn(self.u.rows(), k, |i, j| self.u[(i, j)] * self.s[j]);
        us.matmul(&self.v.transpose())
            .expect("svd factor shapes agree")
    }
}

pub fn svd<T: Scalar>(a: &Matrix<T>) -> Result<Svd<T>> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::InvalidArgument(format!(
            "svd of empty {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    a.ensure_finite("svd input")?;
    if a.rows() < a.cols() {
        let t = jacobi(&a.transpose())?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    jacobi(a)
}

// Requires rows >= cols.
fn jacobi<T: Scalar>(a: &Matrix<T>) -> Result<Svd<T>> {
    let (m, n) = a.shape();
    // Work on columns stored contiguously.
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| {
            let mut e = vec![T::zero(); n];
            e[j] = T::one();
            e
        })
        .collect();

    let tol = T::epsilon() * T::of(m as f64).sqrt();
    // Columns whose squared norm falls below this are numerically zero.
    let fro2: T = a.as_slice().iter().map(|&x| x * x).sum();
    let negligible = fro2 * T::epsilon() * T::epsilon();
    let mut residual = T::zero();
    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        residual = T::zero();
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == T::zero() || alpha <= negligible || beta <= negligible {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                if !(off > tol) {
                    residual = residual.max(off);
                    continue;
                }
                residual = residual.max(off);
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        let max_abs = a
            .as_slice()
            .iter()
            .fold(0.0f64, |acc, x| acc.max(x.wide().abs()));
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            rows: m,
            cols: n,
            max_abs,
            residual: residual.wide(),
        });
    }

    let mut order: Vec<(usize, T)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (j, dot(c, c).sqrt()))
        .collect();
    order.sort_by(|x, y| {
        y.1.partial_cmp(&x.1)
            .expect("finite norms")
            .then(x.0.cmp(&y.0))
    });

    let smax = order.first().map_or(T::zero(), |o| o.1);
    let null_cut = smax * T::epsilon() * T::of(m.max(n) as f64);
    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut null_cols = Vec::new();
    for (k, &(j, sigma)) in order.iter().enumerate() {
        for i in 0..n {
            vm[(i, k)] = v[j][i];
        }
        if sigma > null_cut && sigma > T::zero() {
            for i in 0..m {
                u[(i, k)] = cols[j][i] / sigma;
            }
            s.push(sigma);
        } else {
            s.push(T::zero());
            null_cols.push(k);
        }
    }
    complete_orthonormal(&mut u, &null_cols);
    Ok(Svd { u, s, v: vm })
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every
/// other column, using Gram-Schmidt against the standard basis.
fn complete_orthonormal<T: Scalar>(u: &mut Matrix<T>, targets: &[usize]) {
    let m = u.rows();
    let n = u.cols();
    let mut filled: Vec<bool> = (0..n).map(|k| !targets.contains(&k)).collect();
    let mut candidate = 0usize;
    for &k in targets {
        while candidate < m {
            let mut w = vec![T::zero(); m];
            w[candidate] = T::one();
            candidate += 1;
            for _ in 0..2 {
                for j in 0..n {
                    if !filled[j] {
                        continue;
                    }
                    let uj = u.column(j);
                    let proj = dot(&uj, &w);
                    for (wi, &ui) in w.iter_mut().zip(&uj) {
                        *wi -= proj * ui;
                    }
                }
            }
            let norm = dot(&w, &w).sqrt();
            if norm > T::of(1e-3) {
                for i in 0..m {
                    u[(i, k)] = w[i] / norm;
                }
                filled[k] = true;
                break;
            }
        }
    }
}
