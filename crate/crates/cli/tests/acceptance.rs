//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p linmlp-cli --test acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::gradcheck::check_all;
use common::planted::{
    cluster_case, decomposition_case, feature_case, list_tokens, nofly_case, Signal,
};
use common::{random_tensor, random_tokens, scrambled};
use linmlp::analysis::flops_report;
use linmlp::capture::{
    capture_activations, capture_activations_with, make_splits, CorpusSplits, SplitSpec,
};
use linmlp::gate::{eval_gated_at, label_deltas, LabelRule};
use linmlp::linalg::{ridge_fit, Matrix};
use linmlp::model::tokenizer::tokenize;
use linmlp::model::{
    collapse_mlp_affine, load_weights, mlp_forward, Activation, ConstantGate, MlpOverride,
    ModelConfig, RoutingGate, SoftGate,
};
use linmlp::progressive::{
    center_outward_order, progressive_linearize, LinearizationPlan, StageSplits,
};
use linmlp::surrogate::{eval_all_linear, fit_surrogate, LinearSurrogate};
use linmlp::training::{Schedule, TrainConfig};
use linmlp::Model64;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/corpus.txt");
const ANALYSIS_TOKENS: usize = 16_000;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// Ridge regression against the normal equations, solved by nalgebra.
fn ridge_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for p in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + p);
        let d = rng.random_range(1..=32usize);
        let n = rng.random_range(d + 2..=500usize);
        let k = rng.random_range(1..=8usize);
        let lambda = [0.0, 1e-3, 0.1, 1.0, 10.0][p as usize % 5];
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();

        let fit = ridge_fit(
            &Matrix::from_vec(n, d, x.clone()).map_err(e)?,
            &Matrix::from_vec(n, k, y.clone()).map_err(e)?,
            lambda,
        )
        .map_err(e)?;

        let xm = DMatrix::from_row_slice(n, d, &x);
        let ym = DMatrix::from_row_slice(n, k, &y);
        let xbar = xm.row_mean();
        let ybar = ym.row_mean();
        let xc = DMatrix::from_fn(n, d, |i, j| xm[(i, j)] - xbar[j]);
        let yc = DMatrix::from_fn(n, k, |i, j| ym[(i, j)] - ybar[j]);
        let a = xc.transpose() * &xc + DMatrix::identity(d, d) * lambda;
        let w = a
            .lu()
            .solve(&(xc.transpose() * &yc))
            .ok_or("oracle system is singular")?;
        let b = ybar - xbar * &w;
        for i in 0..d {
            for j in 0..k {
                worst = worst.max((fit.weight[(i, j)] - w[(i, j)]).abs());
            }
        }
        for j in 0..k {
            worst = worst.max((fit.bias[j] - b[j]).abs());
        }
    }
    check(worst < 1e-8, || format!("max error {worst:e}"))?;
    Ok(format!("20 problems, max error {worst:.1e}"))
}

// Identity-activation MLPs collapse to one affine map, which a λ=0
// surrogate recovers exactly.
fn affine_collapse() -> Outcome {
    let mut worst_fwd = 0.0f64;
    let mut worst_delta = 0.0f64;
    for m_seed in 0..10u64 {
        let mut cfg = ModelConfig::gpt2_like(16, 2, 4, 32);
        cfg.vocab_size = 64;
        cfg.activation = Activation::Identity;
        let m = scrambled(cfg, 300 + m_seed, 0.3);
        let layer = (m_seed % 2) as usize;
        let p = m.mlp_params(layer).map_err(e)?;
        let (a, b) = collapse_mlp_affine(&p).map_err(e)?;
        let mut rng = ChaCha8Rng::seed_from_u64(m_seed);
        for _ in 0..100 {
            let x: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y = mlp_forward(&x, &p).map_err(e)?;
            let ax = a.matvec(&x).map_err(e)?;
            for i in 0..16 {
                worst_fwd = worst_fwd.max((y[i] - (ax[i] + b[i])).abs());
            }
        }
        let tokens = random_tokens(1200, 64, 400 + m_seed);
        let splits = make_splits(tokens.len(), SplitSpec::Scaled).map_err(e)?;
        let rec = capture_activations(&m, &tokens, layer, splits.fit).map_err(e)?;
        let s = Arc::new(fit_surrogate(&rec, 0.0).map_err(e)?);
        let r = eval_all_linear(&m, &s, &tokens, splits.eval).map_err(e)?;
        worst_delta = worst_delta.max(r.delta_pct.abs());
    }
    check(worst_fwd < 1e-10, || format!("forward error {worst_fwd:e}"))?;
    check(worst_delta < 1e-8, || {
        format!("|delta_pct| {worst_delta:e}")
    })?;
    Ok(format!(
        "forward error {worst_fwd:.1e}, |delta_pct| {worst_delta:.1e}"
    ))
}

struct Tiny {
    model: Model64,
    tokens: Vec<u32>,
    splits: CorpusSplits,
}

fn tiny(model: &Option<PathBuf>) -> Result<Tiny, String> {
    let path = model
        .as_ref()
        .ok_or("the end-to-end run produced no trained model")?;
    let model: Model64 = load_weights(path).map_err(e)?;
    let bytes = fs::read(CORPUS).map_err(e)?;
    let tokens = tokenize(&bytes[..ANALYSIS_TOKENS]);
    let splits = make_splits(tokens.len(), SplitSpec::Scaled).map_err(e)?;
    Ok(Tiny {
        model,
        tokens,
        splits,
    })
}

fn routing_degenerate(t: &Tiny) -> Outcome {
    let c = &t.model.config;
    check(
        c.d_model == 32 && c.n_layers == 4 && c.vocab_size == 256,
        || format!("unexpected config {c:?}"),
    )?;
    let mut worst = 0.0f64;
    for layer in 0..c.n_layers {
        let rec = capture_activations(&t.model, &t.tokens, layer, t.splits.fit).map_err(e)?;
        let s = Arc::new(fit_surrogate(&rec, 0.01).map_err(e)?);
        let lin = eval_all_linear(&t.model, &s, &t.tokens, t.splits.eval).map_err(e)?;
        let gate = |v: f64| -> Arc<dyn RoutingGate> { Arc::new(ConstantGate(v)) };
        let never =
            eval_gated_at(&t.model, &s, gate(0.0), &t.tokens, t.splits.eval, 0.5).map_err(e)?;
        let always =
            eval_gated_at(&t.model, &s, gate(1.0), &t.tokens, t.splits.eval, 0.5).map_err(e)?;
        worst = worst
            .max((never.ppl_gated - lin.ppl_base).abs())
            .max((always.ppl_gated - lin.ppl_linear).abs());
        check(never.pct_linear == 0.0 && always.pct_linear == 1.0, || {
            format!("layer {layer} pct_linear")
        })?;
    }
    check(worst < 1e-10, || format!("max ppl gap {worst:e}"))?;
    Ok(format!("4 layers, max ppl gap {worst:.1e}"))
}

fn label_rule() -> Outcome {
    let l = label_deltas(&[-0.1, 0.0, 0.1, 0.2]).map_err(e)?;
    check(
        l.rule == LabelRule::Median && (l.threshold - 0.05).abs() < 1e-15,
        || format!("{l:?}"),
    )?;
    check(l.labels == [true, true, false, false], || format!("{l:?}"))?;
    let l = label_deltas(&[1.0, 2.0, 3.0, 4.0]).map_err(e)?;
    check(l.rule == LabelRule::P25 && l.threshold == 1.75, || {
        format!("{l:?}")
    })?;
    check(l.labels == [true, false, false, false], || format!("{l:?}"))?;
    let l = label_deltas(&[0.3; 8]).map_err(e)?;
    check(l.labels.iter().all(|&b| b), || format!("{l:?}"))?;
    Ok("median, 25th-percentile and tie cases".into())
}

fn flops() -> Outcome {
    let r = flops_report(&[0.399], 0.60).map_err(e)?;
    check((34.5..=35.5).contains(&r.mlp_flops_saved_pct), || {
        format!("mlp {}", r.mlp_flops_saved_pct)
    })?;
    check((20.5..=21.5).contains(&r.total_flops_saved_pct), || {
        format!("total {}", r.total_flops_saved_pct)
    })?;
    Ok(format!(
        "mlp {:.4}%, total {:.4}%",
        r.mlp_flops_saved_pct, r.total_flops_saved_pct
    ))
}

fn gradient_check() -> Outcome {
    let surrogate = |layer: usize, seed: u64| {
        let w = random_tensor(&[8, 8], 0.3, seed);
        let b = random_tensor(&[8], 0.3, seed + 1);
        Arc::new(LinearSurrogate::from_affine(
            layer,
            &Matrix::from_vec(8, 8, w.data).unwrap(),
            b.data,
        ))
    };
    let mut lin = SoftGate::linear(8);
    lin.w = random_tensor(&[8], 0.5, 7);
    let mut wide = SoftGate::with_hidden(8, 3, 4);
    wide.v.as_mut().unwrap().data = random_tensor(&[3], 1.0, 5).data;
    let cases = [
        (ModelConfig::gpt2_like(8, 2, 2, 16), vec![]),
        (ModelConfig::neox_like(8, 2, 2, 16), vec![]),
        (
            ModelConfig::gpt2_like(8, 2, 2, 16),
            vec![
                MlpOverride::soft_gated(surrogate(0, 8), lin),
                MlpOverride::soft_gated(surrogate(1, 9), wide),
            ],
        ),
    ];
    let mut worst = 0.0f64;
    let mut tensors = 0;
    for (i, (cfg, ov)) in cases.into_iter().enumerate() {
        let n_model = cfg.param_shapes().len();
        let m = scrambled(cfg, 50 + i as u64, 0.4);
        let a = random_tokens(7, 256, 60 + i as u64);
        let b = random_tokens(5, 256, 70 + i as u64);
        let checks = check_all(&m, &[&a, &b], &ov, 1e-5);
        check(checks.len() >= n_model, || {
            format!("case {i}: {} tensors checked", checks.len())
        })?;
        if !ov.is_empty() {
            check(checks.iter().any(|c| c.name.starts_with("gate.")), || {
                "no gate gradients".into()
            })?;
        }
        for c in &checks {
            check(c.rel_err < 1e-4, || {
                format!("{}: rel err {:e}", c.name, c.rel_err)
            })?;
            worst = worst.max(c.rel_err);
        }
        tensors += checks.len();
    }
    Ok(format!("{tensors} tensors, max rel err {worst:.1e}"))
}

fn progressive_freeze(t: &Tiny) -> Outcome {
    let splits = StageSplits {
        fit: t.splits.fit,
        train: t.splits.gate,
        eval: t.splits.eval,
    };
    let plan = |order: Vec<usize>, ft: usize| LinearizationPlan {
        order,
        ft_steps_per_layer: ft,
        final_ft_steps: ft,
        train_config: TrainConfig {
            batch_size: 4,
            lr: 1e-3,
            steps: ft,
            schedule: Schedule::Constant,
            ..TrainConfig::default()
        },
        lambda: 0.01,
    };
    let order = center_outward_order(4, 3).map_err(e)?;

    // Without fine-tuning each surrogate is a fit on the model with the
    // earlier ones active; rebuild that chain independently.
    let chain =
        progressive_linearize(&t.model, &plan(order.clone(), 0), &t.tokens, splits).map_err(e)?;
    let mut active: Vec<MlpOverride<f64>> = Vec::new();
    for (i, &l) in order.iter().enumerate() {
        let rec =
            capture_activations_with(&t.model, &t.tokens, l, splits.fit, &active).map_err(e)?;
        let s = Arc::new(fit_surrogate(&rec, 0.01).map_err(e)?);
        check(chain.surrogates[i] == s, || {
            format!("stage {i} surrogate differs from the refit chain")
        })?;
        active.push(MlpOverride::all_linear(s));
    }

    let run =
        progressive_linearize(&t.model, &plan(order.clone(), 5), &t.tokens, splits).map_err(e)?;
    check(run.stages.len() == 3, || {
        format!("{} stage records", run.stages.len())
    })?;
    check(
        run.stages
            .iter()
            .map(|s| s.layer_added)
            .eq(order.iter().copied()),
        || "stage order".into(),
    )?;
    check(run.surrogates[0] == chain.surrogates[0], || {
        "first surrogate changed under fine-tuning".into()
    })?;
    for name in linmlp::model::mlp_param_names(order[0]) {
        check(
            run.model.params[&name].bit_eq(&t.model.params[&name]),
            || format!("{name} trained while bypassed"),
        )?;
    }

    let one =
        progressive_linearize(&t.model, &plan(vec![order[0]], 0), &t.tokens, splits).map_err(e)?;
    let direct =
        eval_all_linear(&t.model, &chain.surrogates[0], &t.tokens, splits.eval).map_err(e)?;
    let gap = (one.stages[0].ppl_after_ft - direct.ppl_linear).abs();
    check(gap < 1e-10, || format!("one-layer reduction gap {gap:e}"))?;
    Ok(format!("3 stages {order:?}, one-layer gap {gap:.1e}"))
}

fn probe_suite() -> Outcome {
    let mut lines = Vec::new();
    let r = decomposition_case(Signal::Context, 3000, 1);
    check(
        r.auc_context > 0.9
            && (r.auc_full - r.auc_context).abs() < 0.05
            && (0.45..=0.55).contains(&r.auc_token),
        || format!("context signal {r:?}"),
    )?;
    let r = decomposition_case(Signal::TokenParity, 3000, 2);
    check(
        r.auc_token > 0.9 && (r.auc_full - r.auc_token).abs() < 0.05,
        || format!("token signal {r:?}"),
    )?;
    let r = decomposition_case(Signal::None, 4000, 3);
    check(
        [r.auc_full, r.auc_token, r.auc_context]
            .iter()
            .all(|a| (0.45..=0.55).contains(a)),
        || format!("null decomposition {r:?}"),
    )?;
    lines.push("decomposition");

    let c = nofly_case(3);
    check(list_tokens(&c.list) == c.oracle, || {
        "no-fly list differs from grouping oracle".into()
    })?;
    check(
        c.self_transfer.still_pct == 100.0 && c.self_transfer.pearson_r == Some(1.0),
        || format!("{:?}", c.self_transfer),
    )?;
    let r = c
        .null_transfer
        .pearson_r
        .ok_or("null transfer found nothing")?;
    check(c.null_transfer.found == 150 && r.abs() < 0.1, || {
        format!("null transfer {:?}", c.null_transfer)
    })?;
    check(
        (c.flip_transfer.flipped_pct - c.planted_flip_pct).abs() < 1.0,
        || format!("{:?}", c.flip_transfer),
    )?;
    lines.push("no-fly");

    let r = cluster_case(true, 4);
    check(r.clean_clusters == 2 && r.cluster_auc > 0.95, || {
        format!("planted clusters {} {}", r.clean_clusters, r.cluster_auc)
    })?;
    let r = cluster_case(false, 5);
    check((0.45..=0.55).contains(&r.cluster_auc), || {
        format!("null cluster auc {}", r.cluster_auc)
    })?;
    lines.push("clustering");

    let (r, share) = feature_case(true, 5000, 6);
    check(
        r.features[0].pearson_r.unwrap_or(0.0) > 0.9 && (r.r2 - share).abs() < 0.03,
        || format!("planted features r2 {} share {share}", r.r2),
    )?;
    let (r, _) = feature_case(false, 5000, 7);
    check(r.r2 < 0.05, || format!("null features r2 {}", r.r2))?;
    lines.push("features");
    Ok(lines.join(", "))
}

fn linmlp_cli(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_linmlp"))
        .args(args)
        .output()
        .map_err(e)?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!(
            "linmlp {} failed: {}",
            args[0],
            String::from_utf8_lossy(&o.stderr).trim()
        ))
    }
}

fn result(path: &Path) -> Result<Value, String> {
    let doc: Value = serde_json::from_str(&fs::read_to_string(path).map_err(e)?).map_err(e)?;
    Ok(doc["result"].clone())
}

fn end_to_end(dir: &Path, model_out: &mut Option<PathBuf>) -> Outcome {
    let train = dir.join("train");
    let pipe = dir.join("pipeline");
    let (train_s, pipe_s) = (train.display().to_string(), pipe.display().to_string());
    linmlp_cli(&[
        "train-tiny",
        "--corpus",
        CORPUS,
        "--offset",
        "500000",
        "--limit",
        "200000",
        "--d-model",
        "32",
        "--layers",
        "4",
        "--heads",
        "4",
        "--max-seq",
        "64",
        "--steps",
        "400",
        "--out",
        &train_s,
    ])?;
    let model = train.join("model.lmln");
    *model_out = Some(model.clone());
    let limit = ANALYSIS_TOKENS.to_string();
    linmlp_cli(&[
        "pipeline",
        "--model",
        &model.display().to_string(),
        "--corpus",
        CORPUS,
        "--limit",
        &limit,
        "--out",
        &pipe_s,
    ])?;

    let p = result(&pipe.join("pipeline.json"))?;
    let len = |k: &str| {
        p["splits"][k]["end"].as_u64().unwrap_or(0) - p["splits"][k]["start"].as_u64().unwrap_or(0)
    };
    check(
        len("fit") * 2 == len("gate") && len("fit") * 5 == len("eval"),
        || format!("splits {}", p["splits"]),
    )?;
    for l in 0..4 {
        let r = result(&pipe.join(format!("layer_L{l}.json")))?;
        let (m, p95) = (
            r["delta_stats"]["median"].as_f64(),
            r["delta_stats"]["p95"].as_f64(),
        );
        check(matches!((m, p95), (Some(m), Some(p)) if m < p), || {
            format!("layer {l}: median {m:?}, p95 {p95:?}")
        })?;
    }
    let curve = fs::read_to_string(pipe.join("layer_delta_curve.csv")).map_err(e)?;
    for series in ["all_linear", "linear", "b1", "b3", "b6"] {
        check(
            curve.lines().any(|l| l.split(',').nth(1) == Some(series)),
            || format!("no `{series}` series"),
        )?;
    }
    let summary = fs::read_to_string(pipe.join("summary.csv")).map_err(e)?;
    check(summary.lines().count() == 5, || "summary rows".into())?;
    let comp = result(&pipe.join("compound.json"))?;
    Ok(format!(
        "400 steps, compound delta {:.3}% at {:.1}% linear",
        comp["delta_pct"].as_f64().unwrap_or(f64::NAN),
        100.0 * comp["mean_pct_linear"].as_f64().unwrap_or(f64::NAN)
    ))
}

fn run(name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let out = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let dt = t.elapsed();
    let out = match (out, budget) {
        (Ok(_), Some(b)) if dt > b => Err(format!("took {dt:.1?}, budget {b:?}")),
        (o, _) => o,
    };
    match &out {
        Ok(msg) => println!("PASS  {name:<28} {msg} ({:.1}s)", dt.as_secs_f64()),
        Err(msg) => println!("FAIL  {name:<28} {msg} ({:.1}s)", dt.as_secs_f64()),
    }
    out.is_ok()
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    let dir = tempfile::TempDir::new().expect("temp dir");
    let mut model = None;
    let secs = Duration::from_secs;
    let mut ok = vec![
        run("ridge oracle", Some(secs(10)), ridge_oracle),
        run("affine collapse", Some(secs(30)), affine_collapse),
        run("label rule", None, label_rule),
        run("flops arithmetic", None, flops),
        run("gradient check", Some(secs(120)), gradient_check),
        run("probe suite", Some(secs(300)), probe_suite),
        run("end-to-end pipeline", None, || {
            end_to_end(dir.path(), &mut model)
        }),
    ];
    let t = tiny(&model);
    ok.push(run("routing degenerate paths", Some(secs(60)), || {
        routing_degenerate(t.as_ref().map_err(Clone::clone)?)
    }));
    ok.push(run("progressive freeze", None, || {
        progressive_freeze(t.as_ref().map_err(Clone::clone)?)
    }));
    let failed = ok.iter().filter(|&&b| !b).count();
    println!("{} passed, {failed} failed", ok.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
