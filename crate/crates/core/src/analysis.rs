//! Probes of where the routing signal lives: token/context decomposition,
//! per-token No-Fly lists, residual clustering, per-token feature regression,
//! delta statistics and FLOPs accounting.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capture::ActivationRecords;
use crate::error::{Error, Result};
use crate::gate::{DeltaRecord, DeltaSet, GATE_C};
use crate::linalg::stats::{mean, pearson, percentile_sorted, sorted};
use crate::linalg::{auc, kmeans, logistic_fit, pca, ridge_fit, Matrix};
use crate::scalar::Scalar;

/// Fraction of MLP cost removed for a position routed linear: one `d × d`
/// product against the MLP's two `d × 4d` products.
pub const LINEAR_SAVING: f64 = 7.0 / 8.0;
/// Share of forward-pass FLOPs spent in MLPs.
pub const MLP_SHARE: f64 = 0.60;
pub const NOFLY_THRESHOLD: f64 = 0.05;
pub const NOFLY_MIN_OBS: usize = 10;
pub const HOLDOUT_FRACTION: f64 = 0.3;

/// Seeded train/test index split; the first `1 − holdout` of a ChaCha8
/// shuffle trains.
pub fn holdout_split(n: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * holdout).round() as usize;
    let test = idx.split_off(n - n_test);
    (idx, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub auc_full: f64,
    pub auc_token: f64,
    pub auc_context: f64,
    /// Mean per-position cosine between `e` and `c`.
    pub mean_cos_e_c: f64,
    pub mean_norm_e: f64,
    pub mean_norm_c: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Rows of `records` at the stream positions of `set`, in `set` order.
pub fn records_for<T: Scalar>(
    records: &ActivationRecords<T>,
    set: &DeltaSet,
) -> Result<ActivationRecords<T>> {
    let at: BTreeMap<usize, usize> = records
        .stream_positions
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i))
        .collect();
    let idx = set
        .records
        .iter()
        .map(|r| {
            at.get(&r.position).copied().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "no activation record at stream position {}",
                    r.position
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(records.select(&idx))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Three linear gates on `x`, `e` and `c` with the same labels and the same
/// seeded 70/30 split; AUCs are held-out.
pub fn decomposition_gates<T: Scalar>(
    records: &ActivationRecords<T>,
    labels: &[bool],
    seed: u64,
) -> Result<DecompositionReport> {
    if records.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} records but {} labels",
            records.len(),
            labels.len()
        )));
    }
    let (train, test) = holdout_split(labels.len(), HOLDOUT_FRACTION, seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<bool>>();
    let (ytr, yte) = (pick(&train), pick(&test));
    let held_out = |m: &Matrix<T>| -> Result<f64> {
        let m = m.cast::<f64>();
        let g = logistic_fit(&m.select_rows(&train), &ytr, GATE_C)?;
        let scores: Vec<f64> = m
            .select_rows(&test)
            .iter_rows()
            .map(|r| g.decision(r))
            .collect();
        auc(&scores, &yte)
    };
    let (e, c) = (records.e.cast::<f64>(), records.c.cast::<f64>());
    let mut cos = Vec::with_capacity(records.len());
    let mut ne = Vec::with_capacity(records.len());
    let mut nc = Vec::with_capacity(records.len());
    for (er, cr) in e.iter_rows().zip(c.iter_rows()) {
        let (a, b) = (norm(er), norm(cr));
        ne.push(a);
        nc.push(b);
        if a > 0.0 && b > 0.0 {
            cos.push(er.iter().zip(cr).map(|(p, q)| p * q).sum::<f64>() / (a * b));
        }
    }
    Ok(DecompositionReport {
        auc_full: held_out(&records.x)?,
        auc_token: held_out(&records.e)?,
        auc_context: held_out(&records.c)?,
        mean_cos_e_c: if cos.is_empty() { f64::NAN } else { mean(&cos) },
        mean_norm_e: mean(&ne),
        mean_norm_c: mean(&nc),
        n_train: train.len(),
        n_test: test.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenStat {
    pub mean_delta: f64,
    pub n_obs: usize,
}

/// Per-token mean delta, summed in record order.
pub fn token_means(records: &[DeltaRecord]) -> BTreeMap<u32, TokenStat> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.token_id).or_insert((0.0, 0));
        e.0 += r.delta;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(t, (s, n))| {
            (
                t,
                TokenStat {
                    mean_delta: s / n as f64,
                    n_obs: n,
                },
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoFlyList {
    pub layer: usize,
    pub entries: BTreeMap<u32, TokenStat>,
    pub threshold: f64,
    pub min_obs: usize,
    pub source_corpus: String,
}

/// Tokens seen at least `min_obs` times whose mean delta exceeds `threshold`.
pub fn build_nofly(
    layer: usize,
    records: &[DeltaRecord],
    threshold: f64,
    min_obs: usize,
    source_corpus: &str,
) -> NoFlyList {
    let entries = token_means(records)
        .into_iter()
        .filter(|(_, s)| s.n_obs >= min_obs && s.mean_delta > threshold)
        .collect();
    NoFlyList {
        layer,
        entries,
        threshold,
        min_obs,
        source_corpus: source_corpus.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub list_size: usize,
    /// Listed tokens with at least `min_obs` observations in the new corpus.
    pub found: usize,
    pub still_nofly: usize,
    pub still_pct: f64,
    pub flipped_negative: usize,
    pub flipped_pct: f64,
    /// Pearson r between listed and new per-token means over found tokens;
    /// `None` when fewer than two are found or either side is constant.
    pub pearson_r: Option<f64>,
}

pub fn nofly_transfer(list: &NoFlyList, other: &[DeltaRecord]) -> TransferReport {
    let means = token_means(other);
    let mut old = Vec::new();
    let mut new = Vec::new();
    for (tok, s) in &list.entries {
        if let Some(o) = means.get(tok).filter(|o| o.n_obs >= list.min_obs) {
            old.push(s.mean_delta);
            new.push(o.mean_delta);
        }
    }
    let found = new.len();
    let still = new.iter().filter(|&&d| d > list.threshold).count();
    let flipped = new.iter().filter(|&&d| d < 0.0).count();
    let pct = |k: usize| {
        if found == 0 {
            0.0
        } else {
            100.0 * k as f64 / found as f64
        }
    };
    TransferReport {
        list_size: list.entries.len(),
        found,
        still_nofly: still,
        still_pct: pct(still),
        flipped_negative: flipped,
        flipped_pct: pct(flipped),
        pearson_r: pearson(&old, &new),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStat {
    pub size: usize,
    pub mean_delta: f64,
    pub std_delta: f64,
    /// Fraction of members whose delta has the sign of the cluster mean.
    pub sign_agreement: f64,
    pub clean: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub layer: usize,
    pub k: usize,
    pub pca_dims: usize,
    pub pca_variance: f64,
    /// Held-out AUC of scoring each point by its cluster's mean training
    /// delta (lower delta scores higher).
    pub cluster_auc: f64,
    pub clean_clusters: usize,
    pub clusters: Vec<ClusterStat>,
    /// Cluster of every input row.
    pub assignments: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub pca_dims: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: 20,
            pca_dims: 50,
            seed: 0,
            max_iter: 300,
        }
    }
}

/// Clean: `|mean| > 2·std/√size` and at least 90% of members share the
/// sign of the mean.
fn cluster_stat(deltas: &[f64]) -> ClusterStat {
    let size = deltas.len();
    if size == 0 {
        return ClusterStat {
            size,
            mean_delta: 0.0,
            std_delta: 0.0,
            sign_agreement: 0.0,
            clean: false,
        };
    }
    let m = mean(deltas);
    let sd = (deltas.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / size as f64).sqrt();
    let agree = deltas.iter().filter(|&&d| d * m > 0.0).count() as f64 / size as f64;
    ClusterStat {
        size,
        mean_delta: m,
        std_delta: sd,
        sign_agreement: agree,
        clean: m.abs() > 2.0 * sd / (size as f64).sqrt() && agree >= 0.9,
    }
}

/// PCA then k-means on the training 70%; per-cluster statistics come from
/// training deltas and the AUC from the held-out 30%.
pub fn cluster_residuals<T: Scalar>(
    layer: usize,
    x: &Matrix<T>,
    deltas: &[f64],
    labels: &[bool],
    cfg: &ClusterConfig,
) -> Result<ClusterReport> {
    let n = x.rows();
    if deltas.len() != n || labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} rows, {} deltas, {} labels",
            deltas.len(),
            labels.len()
        )));
    }
    if cfg.pca_dims > x.cols() {
        return Err(Error::InvalidArgument(format!(
            "pca_dims {} exceeds d = {}",
            cfg.pca_dims,
            x.cols()
        )));
    }
    let (train, test) = holdout_split(n, HOLDOUT_FRACTION, cfg.seed);
    if train.len() <= cfg.k {
        return Err(Error::InvalidArgument(format!(
            "{} training points for k = {}",
            train.len(),
            cfg.k
        )));
    }
    let xw = x.cast::<f64>();
    let xtr = xw.select_rows(&train);
    let p = pca(&xtr, cfg.pca_dims.min(train.len() - 1))?;
    let km = kmeans(&p.transform(&xtr), cfg.k, cfg.seed, cfg.max_iter)?;
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); cfg.k];
    for (&i, &cl) in train.iter().zip(&km.labels) {
        members[cl].push(deltas[i]);
    }
    let clusters: Vec<ClusterStat> = members.iter().map(|m| cluster_stat(m)).collect();
    let assignments: Vec<usize> = xw
        .iter_rows()
        .map(|r| km.predict_row(&p.transform_row(r)))
        .collect();
    let scores: Vec<f64> = test
        .iter()
        .map(|&i| -clusters[assignments[i]].mean_delta)
        .collect();
    let yte: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
    Ok(ClusterReport {
        layer,
        k: cfg.k,
        pca_dims: p.n_components(),
        pca_variance: p.total_ratio(),
        cluster_auc: auc(&scores, &yte)?,
        clean_clusters: clusters.iter().filter(|c| c.clean).count(),
        clusters,
        assignments,
    })
}

/// Shipped English closed-class word list, lowercase, one per line.
pub fn function_words() -> BTreeSet<&'static str> {
    include_str!("../data/function_words.txt")
        .lines()
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .collect()
}

pub const FEATURE_NAMES: [&str; 6] = [
    "log_freq",
    "position",
    "next_token_entropy",
    "function_word",
    "punctuation",
    "subword",
];

fn enclosing_word(tokens: &[u32], p: usize) -> Option<String> {
    let alpha = |t: u32| t < 128 && (t as u8).is_ascii_alphabetic();
    if !alpha(tokens[p]) {
        return None;
    }
    let mut a = p;
    while a > 0 && alpha(tokens[a - 1]) {
        a -= 1;
    }
    let mut b = p + 1;
    while b < tokens.len() && alpha(tokens[b]) {
        b += 1;
    }
    Some(
        tokens[a..b]
            .iter()
            .map(|&t| (t as u8).to_ascii_lowercase() as char)
            .collect(),
    )
}

/// One row of [`FEATURE_NAMES`] per delta record. Frequencies are counted
/// over `tokens`; a byte belongs to a function word when the alphabetic run
/// around it is on the list. Byte tokens are never subwords.
pub fn token_features(set: &DeltaSet, tokens: &[u32]) -> Result<Matrix<f64>> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let words = function_words();
    let rows = set
        .records
        .iter()
        .zip(&set.window_positions)
        .zip(&set.entropies)
        .map(|((r, &wp), &h)| {
            if r.position >= tokens.len() || tokens[r.position] != r.token_id {
                return Err(Error::InvalidArgument(format!(
                    "delta record at {} does not match the token stream",
                    r.position
                )));
            }
            let fw = enclosing_word(tokens, r.position).is_some_and(|w| words.contains(w.as_str()));
            let punct = r.token_id < 128 && (r.token_id as u8).is_ascii_punctuation();
            Ok(vec![
                (counts[&r.token_id] as f64).ln(),
                wp as f64,
                h,
                fw as u8 as f64,
                punct as u8 as f64,
                0.0,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no delta records".into()));
    }
    Matrix::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStat {
    pub name: String,
    /// `None` for a constant feature.
    pub pearson_r: Option<f64>,
    pub coefficient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub r2: f64,
    pub n: usize,
    pub features: Vec<FeatureStat>,
}

/// Least-squares regression of delta on the feature columns (minimum-norm
/// solution, so constant columns get zero weight). `r2` is 0 for constant
/// deltas.
pub fn feature_regression(
    features: &Matrix<f64>,
    names: &[&str],
    deltas: &[f64],
) -> Result<FeatureReport> {
    if features.rows() != deltas.len() || features.cols() != names.len() {
        return Err(Error::Shape(format!(
            "features {:?}, {} names, {} deltas",
            features.shape(),
            names.len(),
            deltas.len()
        )));
    }
    let y = Matrix::from_vec(deltas.len(), 1, deltas.to_vec())?;
    let fit = ridge_fit(features, &y, 0.0)?;
    let m = mean(deltas);
    let ss_tot: f64 = deltas.iter().map(|d| (d - m) * (d - m)).sum();
    let ss_res: f64 = features
        .iter_rows()
        .zip(deltas)
        .map(|(r, &d)| {
            let e = d - fit.predict_row(r)[0];
            e * e
        })
        .sum();
    let r2 = if ss_tot == 0.0 {
        0.0
    } else {
        (1.0 - ss_res / ss_tot).max(0.0)
    };
    let features_out = names
        .iter()
        .enumerate()
        .map(|(j, name)| FeatureStat {
            name: name.to_string(),
            pearson_r: pearson(&features.column(j), deltas),
            coefficient: fit.weight[(j, 0)],
        })
        .collect();
    Ok(FeatureReport {
        r2,
        n: deltas.len(),
        features: features_out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    pub p5: f64,
    pub p25: f64,
    pub p75: f64,
    pub p95: f64,
    pub frac_negative: f64,
    /// Fraction with `|δ| < 0.05`.
    pub frac_abs_below_005: f64,
}

pub fn delta_stats(deltas: &[f64]) -> Result<DeltaStats> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("delta_stats of no deltas".into()));
    }
    let s = sorted(deltas)?;
    let n = deltas.len() as f64;
    let q = |p: f64| percentile_sorted(&s, p);
    Ok(DeltaStats {
        n: deltas.len(),
        median: q(50.0),
        mean: mean(deltas),
        p5: q(5.0),
        p25: q(25.0),
        p75: q(75.0),
        p95: q(95.0),
        frac_negative: deltas.iter().filter(|&&d| d < 0.0).count() as f64 / n,
        frac_abs_below_005: deltas.iter().filter(|&&d| d.abs() < 0.05).count() as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_layer_saved_pct: Vec<f64>,
    pub mlp_flops_saved_pct: f64,
    pub total_flops_saved_pct: f64,
    pub mlp_share: f64,
}

/// Per layer `pct · 7/8` of MLP FLOPs saved; the MLP figure is the mean over
/// the given layers and the total scales it by `mlp_share`.
pub fn flops_report(pct_linear_per_layer: &[f64], mlp_share: f64) -> Result<FlopsReport> {
    if pct_linear_per_layer.is_empty() {
        return Err(Error::InvalidArgument(
            "flops_report needs at least one layer".into(),
        ));
    }
    if let Some(p) = pct_linear_per_layer
        .iter()
        .find(|p| !(0.0..=1.0).contains(*p))
    {
        return Err(Error::InvalidArgument(format!(
            "pct_linear {p} outside [0, 1]"
        )));
    }
    if !(0.0..=1.0).contains(&mlp_share) {
        return Err(Error::InvalidArgument(format!(
            "mlp_share {mlp_share} outside [0, 1]"
        )));
    }
    let per_layer: Vec<f64> = pct_linear_per_layer
        .iter()
        .map(|p| 100.0 * p * LINEAR_SAVING)
        .collect();
    let mlp = mean(&per_layer);
    Ok(FlopsReport {
        per_layer_saved_pct: per_layer,
        mlp_flops_saved_pct: mlp,
        total_flops_saved_pct: mlp * mlp_share,
        mlp_share,
    })
}
