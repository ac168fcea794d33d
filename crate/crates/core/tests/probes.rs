mod common;

use common::planted::*;
use linmlp::analysis::{delta_stats, nofly_transfer};
use linmlp::linalg::stats::percentile;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

#[test]
fn context_signal_is_found_by_context_gate() {
    let r = decomposition_case(Signal::Context, 3000, 1);
    assert!(r.auc_context > 0.9, "{r:?}");
    assert!((r.auc_full - r.auc_context).abs() < 0.05, "{r:?}");
    assert!((0.45..=0.55).contains(&r.auc_token), "{r:?}");
}

#[test]
fn token_signal_is_found_by_token_gate() {
    let r = decomposition_case(Signal::TokenParity, 3000, 2);
    assert!(r.auc_token > 0.9, "{r:?}");
    assert!((r.auc_full - r.auc_token).abs() < 0.05, "{r:?}");
    assert!(r.auc_full >= r.auc_token.max(r.auc_context) - 0.05);
}

#[test]
fn random_labels_give_chance_decomposition() {
    let r = decomposition_case(Signal::None, 4000, 3);
    for a in [r.auc_full, r.auc_token, r.auc_context] {
        assert!((0.45..=0.55).contains(&a), "{r:?}");
    }
    assert!(r.mean_cos_e_c.abs() < 0.1);
}

#[test]
fn nofly_lists_and_transfer() {
    let c = nofly_case(3);
    assert_eq!(list_tokens(&c.list), c.oracle);
    assert_eq!(c.list.entries.len(), 150);
    assert!(c
        .list
        .entries
        .values()
        .all(|s| s.n_obs >= 10 && s.mean_delta > 0.05));

    assert_eq!(c.self_transfer.found, 150);
    assert_eq!(c.self_transfer.still_pct, 100.0);
    assert_eq!(c.self_transfer.pearson_r, Some(1.0));

    assert_eq!(c.null_transfer.found, 150);
    assert!(
        c.null_transfer.pearson_r.unwrap().abs() < 0.1,
        "{:?}",
        c.null_transfer
    );

    assert!((c.flip_transfer.flipped_pct - c.planted_flip_pct).abs() < 1.0);
}

#[test]
fn nofly_transfer_with_nothing_found() {
    let c = nofly_case(8);
    let r = nofly_transfer(&c.list, &[]);
    assert_eq!(r.found, 0);
    assert_eq!(r.pearson_r, None);
}

#[test]
fn planted_blobs_form_clean_clusters() {
    let r = cluster_case(true, 4);
    assert_eq!(r.clean_clusters, 2, "{:?}", r.clusters);
    assert!(r.cluster_auc > 0.95, "{r:?}");
}

#[test]
fn unstructured_deltas_give_chance_clusters() {
    let r = cluster_case(false, 5);
    assert!((0.45..=0.55).contains(&r.cluster_auc), "{}", r.cluster_auc);
    assert!(r.clean_clusters <= r.k);
}

#[test]
fn planted_feature_regression() {
    let (r, share) = feature_case(true, 5000, 6);
    assert!(r.features[0].pearson_r.unwrap() > 0.9);
    assert!((r.r2 - share).abs() < 0.03, "{} vs {share}", r.r2);
    assert!((r.features[0].coefficient - 2.0).abs() < 0.05);
}

#[test]
fn null_feature_regression() {
    let (r, _) = feature_case(false, 5000, 7);
    assert!(r.r2 < 0.05, "{}", r.r2);
}

#[test]
fn delta_stats_match_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ln = LogNormal::new(-2.0, 1.0).unwrap();
    let d: Vec<f64> = (0..1001).map(|_| ln.sample(&mut rng) - 0.1).collect();
    let s = delta_stats(&d).unwrap();
    let mut sorted = d.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(s.median, sorted[500]);
    assert_eq!(s.p25, sorted[250]);
    assert_eq!(s.p75, sorted[750]);
    assert_eq!(s.p5, sorted[50]);
    assert_eq!(s.p95, sorted[950]);
    assert_eq!(s.p95, percentile(&d, 95.0).unwrap());
    let neg = sorted.iter().filter(|&&v| v < 0.0).count();
    assert_eq!(s.frac_negative, neg as f64 / 1001.0);
    assert!(s.median < s.p95);
}
