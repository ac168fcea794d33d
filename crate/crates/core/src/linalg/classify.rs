//! Standardization, L2-regularized logistic regression and ROC AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::matrix::{cholesky_solve, dot, Matrix};
use crate::scalar::Scalar;

/// Standard deviations below this are replaced by it.
pub const STD_FLOOR: f64 = 1e-8;

/// Gradient-norm tolerance for [`logistic_fit`].
pub const LOGISTIC_GRAD_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn apply_row<T: Scalar>(&self, x: &[T]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v.wide() - m) / s)
            .collect()
    }

    pub fn apply<T: Scalar>(&self, x: &Matrix<T>) -> Matrix<f64> {
        let rows: Vec<Vec<f64>> = x.iter_rows().map(|r| self.apply_row(r)).collect();
        Matrix::from_rows(&rows).expect("uniform rows")
    }
}

/// Zero-mean, unit-variance columns (population variance). Columns whose
/// standard deviation falls below [`STD_FLOOR`] are divided by the floor.
pub fn standardize<T: Scalar>(x: &Matrix<T>) -> Result<(Matrix<f64>, Standardizer)> {
    if x.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "standardize needs at least 2 rows, got {}",
            x.rows()
        )));
    }
    let s = fit_standardizer(x);
    Ok((s.apply(x), s))
}

pub fn fit_standardizer<T: Scalar>(x: &Matrix<T>) -> Standardizer {
    let wide = x.cast::<f64>();
    let mean = wide.column_means();
    let n = wide.rows() as f64;
    let mut var = vec![0.0; wide.cols()];
    for r in wide.iter_rows() {
        for ((v, &xv), &m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (xv - m) * (xv - m);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    Standardizer { mean, std }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub standardizer: Standardizer,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LogisticModel {
    pub fn decision<T: Scalar>(&self, x: &[T]) -> f64 {
        let z = self.standardizer.apply_row(x);
        dot(&self.weights, &z) + self.bias
    }

    pub fn predict_proba<T: Scalar>(&self, x: &[T]) -> f64 {
        sigmoid(self.decision(x))
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + 1
    }
}

/// `(1/C)·½‖w‖² + Σ log(1 + exp(−ŷ·(w·z + b)))` with `ŷ ∈ {−1, +1}` and the
/// intercept unpenalized; `z` are the standardized rows of `x`.
pub fn logistic_objective(z: &Matrix<f64>, labels: &[bool], w: &[f64], b: f64, c: f64) -> f64 {
    let reg = 0.5 * dot(w, w) / c;
    reg + z
        .iter_rows()
        .zip(labels)
        .map(|(r, &l)| {
            let m = dot(w, r) + b;
            softplus(if l { -m } else { m })
        })
        .sum::<f64>()
}

/// Fits the penalized logistic regression by damped Newton iterations.
///
/// The objective is strictly convex, so the optimum is unique and any
/// convergent method reaches the same point; Newton is used for its
/// determinism and quadratic convergence at these dimensions.
pub fn logistic_fit<T: Scalar>(x: &Matrix<T>, labels: &[bool], c: f64) -> Result<LogisticModel> {
    let n = x.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} rows but {} labels",
            labels.len()
        )));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("C must be > 0, got {c}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == n {
        return Err(Error::DegenerateLabels(format!(
            "{pos} positives out of {n}"
        )));
    }
    x.ensure_finite("logistic inputs")?;
    let (z, standardizer) = standardize(x)?;
    let d = z.cols();
    let p = d + 1;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut obj = logistic_objective(&z, labels, &w, b, c);
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..200 {
        // Gradient and Hessian over (w, b).
        let mut g = vec![0.0; p];
        let mut h = Matrix::<f64>::zeros(p, p);
        for j in 0..d {
            g[j] = w[j] / c;
            h[(j, j)] = 1.0 / c;
        }
        for (r, &l) in z.iter_rows().zip(labels) {
            let m = dot(&w, r) + b;
            let prob = sigmoid(m);
            let resid = prob - if l { 1.0 } else { 0.0 };
            let curv = prob * (1.0 - prob);
            for j in 0..d {
                g[j] += resid * r[j];
            }
            g[d] += resid;
            for a in 0..p {
                let za = if a < d { r[a] } else { 1.0 };
                if za == 0.0 {
                    continue;
                }
                let ca = curv * za;
                for bb in 0..=a {
                    let zb = if bb < d { r[bb] } else { 1.0 };
                    h[(a, bb)] += ca * zb;
                }
            }
        }
        for a in 0..p {
            for bb in 0..a {
                h[(bb, a)] = h[(a, bb)];
            }
        }
        grad_norm = dot(&g, &g).sqrt();
        if grad_norm <= LOGISTIC_GRAD_TOL {
            break;
        }
        iterations += 1;
        // Tiny ridge on the intercept block keeps the Hessian PD when every
        // sample is saturated.
        h[(d, d)] += 1e-12;
        let step = cholesky_solve(&h, &g)?;
        let mut t = 1.0;
        let slope = -dot(&g, &step);
        let mut accepted = false;
        while t >= 1e-10 {
            let w_new: Vec<f64> = w.iter().zip(&step).map(|(&wi, &si)| wi - t * si).collect();
            let b_new = b - t * step[d];
            let o = logistic_objective(&z, labels, &w_new, b_new, c);
            if o <= obj + 1e-4 * t * slope {
                w = w_new;
                b = b_new;
                obj = o;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // At machine precision of the objective; the gradient check above
            // decides convergence.
            break;
        }
    }
    Ok(LogisticModel {
        weights: w,
        bias: b,
        c,
        standardizer,
        iterations,
        grad_norm,
    })
}

/// Probability that a random positive outranks a random negative, ties ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "auc needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));
    // Mann-Whitney U with midranks.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn standardize_constant_and_random() {
        let x = Matrix::from_rows(&[[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]).unwrap();
        let (z, s) = standardize(&x).unwrap();
        assert!(z.column(1).iter().all(|&v| v == 0.0));
        assert_eq!(s.std[1], STD_FLOOR);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::from_fn(100, 4, |_, j| {
            rng.random_range(-3.0..3.0) * (j + 1) as f64 + j as f64
        });
        let (z, _) = standardize(&x).unwrap();
        for j in 0..4 {
            let col = z.column(j);
            let m: f64 = col.iter().sum::<f64>() / 100.0;
            let v: f64 = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 100.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-10);
        }
        let (z2, _) = standardize(&z).unwrap();
        assert!(z2.max_abs_diff(&z) < 1e-10);
        assert!(standardize(&Matrix::<f64>::zeros(1, 2)).is_err());
    }

    #[test]
    fn auc_hand_cases() {
        let labels = [false, false, true, true];
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap(), 0.75);
        assert_eq!(brute_auc(&[0.1, 0.4, 0.35, 0.8], &labels), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_matches_pair_count_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..200).map(|_| rng.random_range(0..10) as f64).collect();
        let labels: Vec<bool> = (0..200).map(|_| rng.random_bool(0.4)).collect();
        let a = auc(&scores, &labels).unwrap();
        assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn separable_one_dimensional() {
        let x = Matrix::from_fn(40, 1, |i, _| i as f64 - 19.5);
        let labels: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let m = logistic_fit(&x, &labels, 1.0).unwrap();
        assert!(m.grad_norm <= LOGISTIC_GRAD_TOL);
        let acc = (0..40)
            .filter(|&i| (m.predict_proba(x.row(i)) > 0.5) == labels[i])
            .count();
        assert_eq!(acc, 40);
        let (z, _) = standardize(&x).unwrap();
        let at_opt = logistic_objective(&z, &labels, &m.weights, m.bias, 1.0);
        let at_zero = logistic_objective(&z, &labels, &[0.0], 0.0, 1.0);
        assert!(at_opt <= at_zero);
    }

    #[test]
    fn optimum_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::from_fn(300, 5, |_, _| rng.random_range(-1.0..1.0));
        let labels: Vec<bool> = (0..300)
            .map(|i| x[(i, 0)] - 0.5 * x[(i, 3)] + rng.random_range(-0.5..0.5) > 0.0)
            .collect();
        let m = logistic_fit(&x, &labels, 1.0).unwrap();
        // Central differences of the objective at the returned optimum.
        let (z, _) = standardize(&x).unwrap();
        let h = 1e-6;
        for j in 0..5 {
            let mut wp = m.weights.clone();
            let mut wm = m.weights.clone();
            wp[j] += h;
            wm[j] -= h;
            let g = (logistic_objective(&z, &labels, &wp, m.bias, 1.0)
                - logistic_objective(&z, &labels, &wm, m.bias, 1.0))
                / (2.0 * h);
            assert!(g.abs() < 1e-4, "dj = {g}");
        }
    }

    #[test]
    fn single_class_rejected() {
        let x = Matrix::<f64>::identity(3);
        assert!(matches!(
            logistic_fit(&x, &[true, true, true], 1.0),
            Err(Error::DegenerateLabels(_))
        ));
    }
}
