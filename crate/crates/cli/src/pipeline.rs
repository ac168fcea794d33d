//! The per-layer chain (surrogate, deltas, gates, routing) and the report
//! tables built from its results.

use std::sync::Arc;

use anyhow::{Context, Result};
use linmlp::analysis::{delta_stats, DeltaStats};
use linmlp::capture::capture_activations;
use linmlp::gate::{
    collect_deltas, eval_gated, label_deltas, select_best, train_gate, DeltaSet, Gate, GateArch,
    LabelRule, RoutingReport,
};
use linmlp::surrogate::{eval_all_linear, fit_surrogate, LinearEval};
use linmlp::{Model64, Surrogate64};
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::out::{f, Run};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerResult {
    pub layer: usize,
    pub all_linear: LinearEval,
    pub label_rule: LabelRule,
    pub label_threshold: f64,
    pub delta_stats: DeltaStats,
    pub gates: Vec<RoutingReport>,
    /// Index into `gates`: lowest delta_pct, then highest pct_linear.
    pub best: Option<usize>,
}

impl LayerResult {
    pub fn best_gate(&self) -> Option<&RoutingReport> {
        self.best.map(|i| &self.gates[i])
    }
}

pub struct LayerArtifacts {
    pub result: LayerResult,
    pub surrogate: Arc<Surrogate64>,
    pub gates: Vec<Arc<Gate>>,
}

pub fn save_surrogate(run: &Run, s: &Surrogate64) -> Result<String> {
    let mut c = s.to_container();
    run.stamp(&mut c);
    let name = format!("surrogate_L{}.lmln", s.layer);
    linmlp::model::write_container(&run.path(&name), &c)?;
    Ok(name)
}

pub fn save_gate(run: &Run, g: &Gate) -> Result<String> {
    let mut c = g.to_container();
    run.stamp(&mut c);
    let name = format!("gate_L{}_{}.lmln", g.layer, g.arch.name());
    linmlp::model::write_container(&run.path(&name), &c)?;
    Ok(name)
}

pub fn save_deltas(run: &Run, set: &DeltaSet) -> Result<String> {
    let mut c = set.to_container();
    run.stamp(&mut c);
    let name = format!("deltas_L{}.lmln", set.layer);
    linmlp::model::write_container(&run.path(&name), &c)?;
    let rows: Vec<Vec<String>> = set
        .records
        .iter()
        .map(|r| {
            vec![
                r.position.to_string(),
                r.token_id.to_string(),
                f(r.l_full),
                f(r.l_lin),
                f(r.delta),
            ]
        })
        .collect();
    run.write_csv(
        &format!("deltas_L{}.csv", set.layer),
        &["position", "token_id", "l_full", "l_lin", "delta"],
        &rows,
    )?;
    Ok(name)
}

pub fn run_layer(
    run: &Run,
    model: &Model64,
    corpus: &Corpus,
    layer: usize,
    lambda: f64,
    archs: &[GateArch],
    seed: u64,
) -> Result<LayerArtifacts> {
    let ctx = || format!("layer {layer}");
    let s = &corpus.splits;
    let rec = capture_activations(model, &corpus.tokens, layer, s.fit).with_context(ctx)?;
    let surrogate = Arc::new(fit_surrogate(&rec, lambda).with_context(ctx)?);
    save_surrogate(run, &surrogate)?;
    let all_linear =
        eval_all_linear(model, &surrogate, &corpus.tokens, s.eval).with_context(ctx)?;

    let set = collect_deltas(model, &surrogate, &corpus.tokens, s.gate).with_context(ctx)?;
    save_deltas(run, &set)?;
    let deltas = set.deltas();
    let labels = label_deltas(&deltas).with_context(ctx)?;
    let mut gates = Vec::new();
    let mut reports = Vec::new();
    for &arch in archs {
        let g = Arc::new(
            train_gate(arch, layer, &set.x, &labels.labels, seed)
                .with_context(|| format!("layer {layer}, {} gate", arch.name()))?,
        );
        save_gate(run, &g)?;
        reports.push(eval_gated(model, &surrogate, &g, &corpus.tokens, s.eval).with_context(ctx)?);
        gates.push(g);
    }
    Ok(LayerArtifacts {
        result: LayerResult {
            layer,
            all_linear,
            label_rule: labels.rule,
            label_threshold: labels.threshold,
            delta_stats: delta_stats(&deltas)?,
            best: select_best(&reports),
            gates: reports,
        },
        surrogate,
        gates,
    })
}

/// One summary row per layer and a long-format layer-vs-delta table with
/// one series per gate architecture plus the all-linear curve.
pub fn write_report(run: &Run, layers: &[LayerResult]) -> Result<()> {
    let mut sorted: Vec<&LayerResult> = layers.iter().collect();
    sorted.sort_by_key(|l| l.layer);
    let summary: Vec<Vec<String>> = sorted
        .iter()
        .map(|l| {
            let best = l.best_gate();
            vec![
                l.layer.to_string(),
                f(l.all_linear.delta_pct),
                best.map_or(String::new(), |b| f(b.delta_pct)),
                best.map_or(String::new(), |b| f(b.pct_linear)),
                best.and_then(|b| b.arch)
                    .map_or(String::new(), |a| a.name().to_string()),
                f(l.delta_stats.median),
                f(l.delta_stats.p95),
            ]
        })
        .collect();
    run.write_csv(
        "summary.csv",
        &[
            "layer",
            "all_linear_delta_pct",
            "best_gate_delta_pct",
            "pct_linear",
            "best_arch",
            "median_delta",
            "p95_delta",
        ],
        &summary,
    )?;
    let mut curve = Vec::new();
    for l in &sorted {
        curve.push(vec![
            l.layer.to_string(),
            "all_linear".into(),
            f(l.all_linear.delta_pct),
            f(1.0),
        ]);
        for g in &l.gates {
            let series = g.arch.map_or("gate", |a| a.name());
            curve.push(vec![
                l.layer.to_string(),
                series.into(),
                f(g.delta_pct),
                f(g.pct_linear),
            ]);
        }
        if let Some(b) = l.best_gate() {
            curve.push(vec![
                l.layer.to_string(),
                "best_gate".into(),
                f(b.delta_pct),
                f(b.pct_linear),
            ]);
        }
    }
    run.write_csv(
        "layer_delta_curve.csv",
        &["layer", "series", "delta_pct", "pct_linear"],
        &curve,
    )?;
    Ok(())
}
