//! `linmlp analyze ...`: probes over a collected delta file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use linmlp::analysis::{
    build_nofly, cluster_residuals, decomposition_gates, delta_stats, feature_regression,
    nofly_transfer, records_for, token_features, ClusterConfig, FEATURE_NAMES, NOFLY_MIN_OBS,
    NOFLY_THRESHOLD,
};
use linmlp::capture::{capture_activations, SplitRange};
use linmlp::gate::{label_deltas, DeltaSet};
use serde::Serialize;
use serde_json::json;

use crate::data::{load_model, require, CorpusArgs};
use crate::out::{f, Run};

#[derive(Subcommand)]
pub enum AnalyzeCommand {
    /// Token-identity vs context gates on the e / c split of the MLP input.
    Decompose(DecomposeArgs),
    /// Tokens whose mean delta stays above a threshold; optional transfer
    /// check against a second delta file.
    Nofly(NoflyArgs),
    /// k-means over PCA-reduced MLP inputs, scored by cluster mean delta.
    Cluster(ClusterArgs),
    /// Regression of delta on surface features of each token.
    Features(FeaturesArgs),
    /// Distribution summary of the deltas.
    Stats(StatsArgs),
}

#[derive(Args, Serialize)]
pub struct DecomposeArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    deltas: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct NoflyArgs {
    #[arg(long)]
    deltas: PathBuf,
    /// Delta file from another corpus or model to test the list against.
    #[arg(long)]
    transfer: Option<PathBuf>,
    #[arg(long, default_value_t = NOFLY_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = NOFLY_MIN_OBS)]
    min_obs: usize,
    /// Label recorded as the list's source corpus.
    #[arg(long, default_value = "")]
    source: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct ClusterArgs {
    #[arg(long)]
    deltas: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Default: min(50, d_model).
    #[arg(long)]
    pca_dims: Option<usize>,
    #[arg(long, default_value_t = 300)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct FeaturesArgs {
    /// The corpus selection the deltas were collected on.
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    deltas: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    deltas: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

fn load(path: &Path) -> Result<DeltaSet> {
    require(path, "delta file")?;
    DeltaSet::load(path).with_context(|| format!("cannot load deltas {}", path.display()))
}

pub fn run(cmd: AnalyzeCommand) -> Result<()> {
    match cmd {
        AnalyzeCommand::Decompose(a) => decompose(a),
        AnalyzeCommand::Nofly(a) => nofly(a),
        AnalyzeCommand::Cluster(a) => cluster(a),
        AnalyzeCommand::Features(a) => features(a),
        AnalyzeCommand::Stats(a) => stats(a),
    }
}

fn decompose(a: DecomposeArgs) -> Result<()> {
    let run = Run::new(
        "analyze decompose",
        &a,
        a.seed,
        &[&a.model, &a.corpus.corpus, &a.deltas],
        &a.out,
    )?;
    let model = load_model(&a.model)?;
    let c = a.corpus.load()?;
    let set = load(&a.deltas)?;
    let (lo, hi) = match (
        set.records.iter().map(|r| r.position).min(),
        set.records.iter().map(|r| r.position).max(),
    ) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => bail!("{} has no records", a.deltas.display()),
    };
    // Recapture over the windows the deltas came from.
    let span = [c.splits.fit, c.splits.gate, c.splits.eval]
        .into_iter()
        .find(|s| s.start <= lo && hi < s.end)
        .unwrap_or(SplitRange::new(lo, hi + 1));
    let rec = capture_activations(&model, &c.tokens, set.layer, span)?;
    let rec = records_for(&rec, &set).context("delta file does not match this model and corpus")?;
    let labels = label_deltas(&set.deltas())?;
    let r = decomposition_gates(&rec, &labels.labels, a.seed)?;
    run.write_json(
        &format!("decompose_L{}.json", set.layer),
        &json!({ "layer": set.layer, "report": r }),
    )?;
    Ok(())
}

fn nofly(a: NoflyArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.deltas];
    if let Some(t) = &a.transfer {
        require(t, "delta file")?;
        inputs.push(t);
    }
    require(&a.deltas, "delta file")?;
    let run = Run::new("analyze nofly", &a, a.seed, &inputs, &a.out)?;
    let set = load(&a.deltas)?;
    let list = build_nofly(set.layer, &set.records, a.threshold, a.min_obs, &a.source);
    let rows: Vec<Vec<String>> = list
        .entries
        .iter()
        .map(|(t, s)| vec![t.to_string(), f(s.mean_delta), s.n_obs.to_string()])
        .collect();
    run.write_csv(
        &format!("nofly_L{}.csv", set.layer),
        &["token_id", "mean_delta", "n_obs"],
        &rows,
    )?;
    let transfer = match &a.transfer {
        Some(p) => Some(nofly_transfer(&list, &load(p)?.records)),
        None => None,
    };
    run.write_json(
        &format!("nofly_L{}.json", set.layer),
        &json!({ "list": list, "transfer": transfer }),
    )?;
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let run = Run::new("analyze cluster", &a, a.seed, &[&a.deltas], &a.out)?;
    let set = load(&a.deltas)?;
    let deltas = set.deltas();
    let labels = label_deltas(&deltas)?;
    let cfg = ClusterConfig {
        k: a.k,
        pca_dims: a.pca_dims.unwrap_or(set.x.cols().min(50)),
        seed: a.seed,
        max_iter: a.max_iter,
    };
    let r = cluster_residuals(set.layer, &set.x, &deltas, &labels.labels, &cfg)?;
    let rows: Vec<Vec<String>> = set
        .records
        .iter()
        .zip(&r.assignments)
        .map(|(rec, k)| {
            vec![
                rec.position.to_string(),
                rec.token_id.to_string(),
                k.to_string(),
                f(rec.delta),
            ]
        })
        .collect();
    run.write_csv(
        &format!("cluster_assignments_L{}.csv", set.layer),
        &["position", "token_id", "cluster", "delta"],
        &rows,
    )?;
    run.write_json(
        &format!("cluster_L{}.json", set.layer),
        &json!({
            "layer": r.layer,
            "k": r.k,
            "pca_dims": r.pca_dims,
            "pca_variance": r.pca_variance,
            "cluster_auc": r.cluster_auc,
            "clean_clusters": r.clean_clusters,
            "clusters": r.clusters,
        }),
    )?;
    Ok(())
}

fn features(a: FeaturesArgs) -> Result<()> {
    let run = Run::new(
        "analyze features",
        &a,
        a.seed,
        &[&a.corpus.corpus, &a.deltas],
        &a.out,
    )?;
    let c = a.corpus.load()?;
    let set = load(&a.deltas)?;
    let x = token_features(&set, &c.tokens)
        .context("delta file does not match this corpus selection")?;
    let r = feature_regression(&x, &FEATURE_NAMES, &set.deltas())?;
    run.write_json(
        &format!("features_L{}.json", set.layer),
        &json!({ "layer": set.layer, "report": r }),
    )?;
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let run = Run::new("analyze stats", &a, a.seed, &[&a.deltas], &a.out)?;
    let set = load(&a.deltas)?;
    let d = set.deltas();
    let labels = label_deltas(&d)?;
    run.write_json(
        &format!("stats_L{}.json", set.layer),
        &json!({
            "layer": set.layer,
            "stats": delta_stats(&d)?,
            "label_rule": labels.rule,
            "label_threshold": labels.threshold,
        }),
    )?;
    Ok(())
}
