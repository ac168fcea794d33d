//! Synthetic data with a known signal (or none) for the probe checks.

use linmlp::analysis::{
    build_nofly, cluster_residuals, decomposition_gates, feature_regression, nofly_transfer,
    ClusterConfig, ClusterReport, DecompositionReport, FeatureReport, NoFlyList, TransferReport,
    NOFLY_MIN_OBS, NOFLY_THRESHOLD,
};
use linmlp::capture::ActivationRecords;
use linmlp::gate::{label_deltas, DeltaRecord};
use linmlp::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    Context,
    TokenParity,
    None,
}

/// `x = e + c` with `e` a fixed random embedding of one of `vocab` tokens and
/// `c` Gaussian noise; the scales keep the planted component dominant.
pub fn decomposition_case(signal: Signal, n: usize, seed: u64) -> DecompositionReport {
    let d = 16;
    let (vocab, e_scale, c_scale) = match signal {
        Signal::TokenParity => (12, 1.0, 0.1),
        Signal::Context => (40, 0.2, 1.0),
        Signal::None => (40, 1.0, 1.0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let table = Matrix::from_fn(vocab, d, |_, _| e_scale * unit.sample(&mut rng));
    let w: Vec<f64> = (0..d).map(|_| unit.sample(&mut rng)).collect();
    let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(0..vocab as u32)).collect();
    let e = Matrix::from_fn(n, d, |i, j| table[(tokens[i] as usize, j)]);
    let c = Matrix::from_fn(n, d, |_, _| c_scale * unit.sample(&mut rng));
    let x = Matrix::from_fn(n, d, |i, j| e[(i, j)] + c[(i, j)]);
    let labels: Vec<bool> = (0..n)
        .map(|i| match signal {
            Signal::Context => c.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() > 0.0,
            Signal::TokenParity => tokens[i] % 2 == 0,
            Signal::None => rng.random_bool(0.5),
        })
        .collect();
    let rec = ActivationRecords {
        layer: 0,
        y: x.clone(),
        x,
        e,
        c,
        token_ids: tokens,
        positions: (0..n).collect(),
        stream_positions: (0..n).collect(),
        inexact: 0,
    };
    decomposition_gates(&rec, &labels, seed).unwrap()
}

fn record(token_id: u32, position: usize, delta: f64) -> DeltaRecord {
    DeltaRecord {
        layer: 0,
        position,
        token_id,
        l_full: 2.0,
        l_lin: 2.0 + delta,
        delta,
    }
}

/// Per-token planted means with Gaussian noise; `obs` observations each.
pub fn planted_records(means: &[f64], obs: usize, noise: f64, seed: u64) -> Vec<DeltaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, noise).unwrap();
    let mut out = Vec::new();
    for round in 0..obs {
        for (t, &m) in means.iter().enumerate() {
            out.push(record(
                t as u32,
                round * means.len() + t,
                m + dist.sample(&mut rng),
            ));
        }
    }
    out
}

/// Grouping oracle: per-token sums and counts by brute force.
pub fn nofly_oracle(records: &[DeltaRecord], threshold: f64, min_obs: usize) -> Vec<u32> {
    let max = records.iter().map(|r| r.token_id).max().unwrap_or(0);
    (0..=max)
        .filter(|&t| {
            let d: Vec<f64> = records
                .iter()
                .filter(|r| r.token_id == t)
                .map(|r| r.delta)
                .collect();
            d.len() >= min_obs && d.iter().sum::<f64>() / d.len() as f64 > threshold
        })
        .collect()
}

pub struct NoFlyCase {
    pub list: NoFlyList,
    pub oracle: Vec<u32>,
    pub self_transfer: TransferReport,
    pub null_transfer: TransferReport,
    pub flip_transfer: TransferReport,
    pub planted_flip_pct: f64,
}

/// 150 listed tokens; the null corpus re-draws every mean independently,
/// the flip corpus negates 30% of them.
pub fn nofly_case(seed: u64) -> NoFlyCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tok = 200;
    let means: Vec<f64> = (0..n_tok)
        .map(|t| {
            if t < 150 {
                rng.random_range(0.1..0.5)
            } else {
                rng.random_range(-0.3..0.0)
            }
        })
        .collect();
    let source = planted_records(&means, 12, 0.05, seed + 1);
    let list = build_nofly(0, &source, NOFLY_THRESHOLD, NOFLY_MIN_OBS, "planted");
    let oracle = nofly_oracle(&source, NOFLY_THRESHOLD, NOFLY_MIN_OBS);

    let redrawn: Vec<f64> = (0..n_tok).map(|_| rng.random_range(-0.3..0.5)).collect();
    let null = planted_records(&redrawn, 12, 0.05, seed + 2);
    let flipped: Vec<f64> = means
        .iter()
        .enumerate()
        .map(|(t, &m)| if t % 10 < 3 { -m } else { m })
        .collect();
    let flip = planted_records(&flipped, 12, 0.02, seed + 3);
    NoFlyCase {
        self_transfer: nofly_transfer(&list, &source),
        null_transfer: nofly_transfer(&list, &null),
        flip_transfer: nofly_transfer(&list, &flip),
        planted_flip_pct: 30.0,
        list,
        oracle,
    }
}

/// Two separated blobs with deltas of opposite sign, or one cloud with
/// deltas independent of position.
pub fn cluster_case(planted: bool, seed: u64) -> ClusterReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let (n, d) = if planted { (600, 16) } else { (4000, 16) };
    let blob: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let x = Matrix::from_fn(n, d, |i, j| {
        let shift = if planted && j == 0 {
            if blob[i] {
                6.0
            } else {
                -6.0
            }
        } else {
            0.0
        };
        shift + unit.sample(&mut rng)
    });
    let deltas: Vec<f64> = (0..n)
        .map(|i| {
            let base = if planted {
                if blob[i] {
                    0.5
                } else {
                    -0.5
                }
            } else {
                0.0
            };
            base + 0.1 * unit.sample(&mut rng)
        })
        .collect();
    let labels: Vec<bool> = if planted {
        deltas.iter().map(|&d| d < 0.0).collect()
    } else {
        label_deltas(&deltas).unwrap().labels
    };
    let cfg = if planted {
        ClusterConfig {
            k: 2,
            pca_dims: 5,
            seed,
            max_iter: 100,
        }
    } else {
        ClusterConfig {
            k: 20,
            pca_dims: 10,
            seed,
            max_iter: 100,
        }
    };
    cluster_residuals(0, &x, &deltas, &labels, &cfg).unwrap()
}

pub const SYNTH_FEATURES: [&str; 3] = ["log_freq", "position", "entropy"];

/// `delta = 2·log_freq + N(0, 1)` (planted) or pure noise; returns the
/// report and the planted signal share of the variance.
pub fn feature_case(planted: bool, n: usize, seed: u64) -> (FeatureReport, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let f = Matrix::from_fn(n, 3, |_, j| match j {
        0 => rng.random_range(0.0..5.0),
        1 => rng.random_range(0..64) as f64,
        _ => rng.random_range(0.0..4.0),
    });
    let deltas: Vec<f64> = (0..n)
        .map(|i| if planted { 2.0 * f[(i, 0)] } else { 0.0 } + unit.sample(&mut rng))
        .collect();
    let signal = 4.0 * 25.0 / 12.0;
    let share = if planted {
        signal / (signal + 1.0)
    } else {
        0.0
    };
    (
        feature_regression(&f, &SYNTH_FEATURES, &deltas).unwrap(),
        share,
    )
}

/// Indices of the per-token map, for comparisons against the oracle.
pub fn list_tokens(list: &NoFlyList) -> Vec<u32> {
    list.entries.keys().copied().collect()
}
