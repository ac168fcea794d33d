use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KMeans<T> {
    pub labels: Vec<usize>,
    pub centroids: Matrix<T>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl<T: Scalar> KMeans<T> {
    pub fn predict_row(&self, x: &[T]) -> usize {
        nearest(&self.centroids, x).0
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).wide();
            d * d
        })
        .sum()
}

fn nearest<T: Scalar>(centroids: &Matrix<T>, x: &[T]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding from a ChaCha8 stream.
///
/// An empty cluster takes the point farthest from its current centroid
/// (lowest index on ties), which can only lower the inertia.
pub fn kmeans<T: Scalar>(x: &Matrix<T>, k: usize, seed: u64, max_iter: usize) -> Result<KMeans<T>> {
    let n = x.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "kmeans: k = {k} with {n} points"
        )));
    }
    x.ensure_finite("kmeans input")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(x, k, &mut rng);

    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0f64; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        for i in 0..n {
            let (j, d) = nearest(&centroids, x.row(i));
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
            dists[i] = d;
        }
        history.push(dists.iter().sum());
        if !changed && iterations > 1 {
            break;
        }
        centroids = update_centroids(x, &mut labels, &mut dists, k);
    }
    let inertia = (0..n)
        .map(|i| sq_dist(x.row(i), centroids.row(labels[i])))
        .sum();
    Ok(KMeans {
        labels,
        centroids,
        inertia,
        history,
        iterations,
    })
}

fn plus_plus_init<T: Scalar>(x: &Matrix<T>, k: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let n = x.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(x.row(i), x.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // All remaining points coincide with a centroid.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    x.select_rows(&chosen)
}

fn update_centroids<T: Scalar>(
    x: &Matrix<T>,
    labels: &mut [usize],
    dists: &mut [f64],
    k: usize,
) -> Matrix<T> {
    let d = x.cols();
    let mut sums = vec![vec![0.0f64; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, &v) in sums[l].iter_mut().zip(x.row(i)) {
            *s += v.wide();
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        // Farthest point from its centroid, taken from a cluster that can spare it.
        let far = (0..x.rows()).filter(|&i| counts[labels[i]] > 1).fold(
            None,
            |best: Option<usize>, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            },
        );
        if let Some(i) = far {
            let old = labels[i];
            counts[old] -= 1;
            for (s, &v) in sums[old].iter_mut().zip(x.row(i)) {
                *s -= v.wide();
            }
            labels[i] = j;
            dists[i] = 0.0;
            counts[j] = 1;
            sums[j] = x.row(i).iter().map(|v| v.wide()).collect();
        }
    }
    Matrix::from_fn(k, d, |j, c| {
        if counts[j] == 0 {
            T::zero()
        } else {
            T::of(sums[j][c] / counts[j] as f64)
        }
    })
}
