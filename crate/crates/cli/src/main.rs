mod analyze;
mod data;
mod out;
mod pipeline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use linmlp::capture::{capture_activations, SplitRange};
use linmlp::gate::{
    collect_deltas, compound_gating, eval_gated_at, label_deltas, train_gate, DeltaSet, Gate,
    GateArch, ROUTE_THRESHOLD,
};
use linmlp::model::{ModelConfig, RoutingGate, Wiring};
use linmlp::progressive::{
    center_outward_order, progressive_linearize, two_phase, LinearizationPlan, StageSplits,
    TwoPhaseConfig,
};
use linmlp::surrogate::{eval_all_linear, fit_surrogate, LinearSurrogate, DEFAULT_LAMBDA};
use linmlp::training::{finetune_with, Schedule, TrainConfig};
use linmlp::{Model64, Surrogate64};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::data::{load_model, load_tokens, require, save_model, CorpusArgs};
use crate::out::{f, read_result, Run};
use crate::pipeline::{
    run_layer, save_deltas, save_gate, save_surrogate, write_report, LayerResult,
};

/// Measure, fit and route around the linear part of transformer MLPs.
#[derive(Parser)]
#[command(name = "linmlp", version)]
struct Cli {
    /// Worker threads for parallel work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a desk-scale byte-level model on a corpus.
    TrainTiny(TrainTinyArgs),
    /// Ridge-fit a linear surrogate for one MLP on the fit split.
    FitSurrogate(FitArgs),
    /// Perplexity with one MLP replaced by its surrogate (eval split).
    EvalLinear(SurrogateEvalArgs),
    /// Per-position loss deltas on the gate split.
    CollectDeltas(SurrogateEvalArgs),
    /// Train a routing gate on collected deltas.
    TrainGate(TrainGateArgs),
    /// Hard-gated perplexity on the eval split.
    EvalGate(EvalGateArgs),
    /// All given gates active at once.
    Compound(CompoundArgs),
    /// Interpretability probes.
    #[command(subcommand)]
    Analyze(analyze::AnalyzeCommand),
    /// Center-outward replacement with interleaved fine-tuning.
    Progressive(ProgressiveArgs),
    /// Linearize and fine-tune, then train soft gates on the frozen model.
    TwoPhase(TwoPhaseArgs),
    /// Full chain for a set of layers: surrogate, deltas, every gate
    /// architecture, compound gating and report tables.
    Pipeline(PipelineArgs),
    /// Merge per-layer JSON results into summary and plot CSVs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum WiringArg {
    Sequential,
    Parallel,
}

#[derive(Args, Serialize)]
struct TrainTinyArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    offset: usize,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    max_seq: usize,
    #[arg(long, value_enum, default_value = "sequential")]
    wiring: WiringArg,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    /// Also save `model_step{N}.lmln` every N steps (0: final model only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct FitArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SurrogateEvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    surrogate: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainGateArgs {
    #[arg(long)]
    deltas: PathBuf,
    #[arg(long, value_parser = parse_arch, default_value = "linear")]
    arch: GateArch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalGateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    surrogate: PathBuf,
    #[arg(long)]
    gate: PathBuf,
    /// Route linear iff the gate score exceeds this.
    #[arg(long, default_value_t = ROUTE_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct CompoundArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// `SURROGATE=GATE` pairs, one per participating layer.
    #[arg(long = "pair", required = true)]
    pairs: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ProgressiveArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Number of layers to linearize in center-outward order.
    #[arg(long, conflicts_with = "order")]
    n: Option<usize>,
    /// Explicit comma-separated layer order.
    #[arg(long, value_delimiter = ',')]
    order: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    ft_steps: usize,
    #[arg(long, default_value_t = 200)]
    final_ft_steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TwoPhaseArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    layers: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    phase1_steps: usize,
    #[arg(long, default_value_t = 100)]
    phase2_steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    phase1_lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    phase2_lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Hidden width of each soft gate; 0 gives the d+1 linear gate.
    #[arg(long, default_value_t = 0)]
    gate_hidden: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PipelineArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Comma-separated layers (default: every layer).
    #[arg(long, value_delimiter = ',')]
    layer: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, value_parser = parse_arch, value_delimiter = ',', default_value = "linear,b1,b3,b6")]
    arch: Vec<GateArch>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// Per-layer result JSONs (as written by `pipeline`).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

fn parse_arch(s: &str) -> std::result::Result<GateArch, String> {
    GateArch::parse(s)
        .ok_or_else(|| format!("unknown gate architecture `{s}` (linear, b1, b3, b6)"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainTiny(a) => train_tiny(a),
        Command::FitSurrogate(a) => fit(a),
        Command::EvalLinear(a) => eval_linear(a),
        Command::CollectDeltas(a) => deltas(a),
        Command::TrainGate(a) => gate_train(a),
        Command::EvalGate(a) => gate_eval(a),
        Command::Compound(a) => compound(a),
        Command::Analyze(a) => analyze::run(a),
        Command::Progressive(a) => progressive(a),
        Command::TwoPhase(a) => two_phase_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(a),
        Command::Report(a) => report(a),
    }
}

fn load_surrogate(path: &Path) -> Result<Surrogate64> {
    require(path, "surrogate")?;
    LinearSurrogate::load(path).with_context(|| format!("cannot load surrogate {}", path.display()))
}

fn load_gate(path: &Path) -> Result<Gate> {
    require(path, "gate")?;
    Gate::load(path).with_context(|| format!("cannot load gate {}", path.display()))
}

fn load_deltas(path: &Path) -> Result<DeltaSet> {
    require(path, "delta file")?;
    DeltaSet::load(path).with_context(|| format!("cannot load deltas {}", path.display()))
}

fn train_tiny(a: TrainTinyArgs) -> Result<()> {
    require(&a.corpus, "corpus")?;
    let run = Run::new("train-tiny", &a, a.seed, &[&a.corpus], &a.out)?;
    let tokens = load_tokens(&a.corpus, a.offset, a.limit)?;
    let mut cfg = ModelConfig::gpt2_like(a.d_model, a.layers, a.heads, a.max_seq);
    if let WiringArg::Parallel = a.wiring {
        cfg = ModelConfig {
            wiring: Wiring::Parallel,
            ..ModelConfig::neox_like(a.d_model, a.layers, a.heads, a.max_seq)
        };
    }
    let mut model = Model64::init(cfg, a.seed)?;
    let tc = TrainConfig {
        batch_size: a.batch,
        lr: a.lr,
        steps: a.steps,
        schedule: Schedule::Cosine,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let every = a.checkpoint_every;
    let trace = finetune_with(
        &mut model,
        &tokens,
        SplitRange::new(0, tokens.len()),
        &mut [],
        &tc,
        |r, m| {
            let done = r.step + 1;
            if every > 0 && done % every == 0 && done < tc.steps {
                save_model(&run, m, &format!("model_step{done}.lmln")).map_err(|e| {
                    linmlp::Error::InvalidArgument(format!("checkpoint at step {done}: {e:#}"))
                })?;
            }
            Ok(())
        },
    )?;
    save_model(&run, &model, "model.lmln")?;
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|r| vec![r.step.to_string(), f(r.lr), f(r.loss)])
        .collect();
    run.write_csv("train_loss.csv", &["step", "lr", "loss"], &rows)?;
    let tail = trace.len().saturating_sub(20);
    let recent: Vec<f64> = trace[tail..].iter().map(|r| r.loss).collect();
    run.write_json(
        "train.json",
        &json!({
            "model_config": model.config,
            "n_params": model.n_params(),
            "n_tokens": tokens.len(),
            "first_loss": trace.first().map(|r| r.loss),
            "final_loss_mean20": if recent.is_empty() { None } else { Some(recent.iter().sum::<f64>() / recent.len() as f64) },
        }),
    )?;
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let run = Run::new(
        "fit-surrogate",
        &a,
        a.seed,
        &[&a.model, &a.corpus.corpus],
        &a.out,
    )?;
    let model = load_model(&a.model)?;
    let c = a.corpus.load()?;
    let rec = capture_activations(&model, &c.tokens, a.layer, c.splits.fit)?;
    let s = fit_surrogate(&rec, a.lambda)?;
    let err = s.apply_rows(&rec.x).max_abs_diff(&rec.y);
    let file = save_surrogate(&run, &s)?;
    run.write_json(
        &format!("surrogate_L{}.json", s.layer),
        &json!({
            "layer": s.layer,
            "lambda": s.lambda,
            "n_fit": s.n_fit,
            "fit_split": s.fit_split,
            "max_abs_fit_error": err,
            "file": file,
        }),
    )?;
    Ok(())
}

fn eval_linear(a: SurrogateEvalArgs) -> Result<()> {
    let run = Run::new(
        "eval-linear",
        &a,
        a.seed,
        &[&a.model, &a.corpus.corpus, &a.surrogate],
        &a.out,
    )?;
    let model = load_model(&a.model)?;
    let c = a.corpus.load()?;
    let s = Arc::new(load_surrogate(&a.surrogate)?);
    let r = eval_all_linear(&model, &s, &c.tokens, c.splits.eval)?;
    run.write_json(&format!("eval_linear_L{}.json", s.layer), &r)?;
    Ok(())
}

fn deltas(a: SurrogateEvalArgs) -> Result<()> {
    let run = Run::new(
        "collect-deltas",
        &a,
        a.seed,
        &[&a.model, &a.corpus.corpus, &a.surrogate],
        &a.out,
    )?;
    let model = load_model(&a.model)?;
    let c = a.corpus.load()?;
    let s = Arc::new(load_surrogate(&a.surrogate)?);
    let set = collect_deltas(&model, &s, &c.tokens, c.splits.gate)?;
    let file = save_deltas(&run, &set)?;
    let d = set.deltas();
    let labels = label_deltas(&d)?;
    run.write_json(
        &format!("deltas_L{}.json", set.layer),
        &json!({
            "layer": set.layer,
            "n_records": set.len(),
            "split": c.splits.gate,
            "delta_stats": linmlp::analysis::delta_stats(&d)?,
            "label_rule": labels.rule,
            "label_threshold": labels.threshold,
            "n_linear_ok": labels.labels.iter().filter(|&&l| l).count(),
            "file": file,
        }),
    )?;
    Ok(())
}

fn gate_train(a: TrainGateArgs) -> Result<()> {
    let run = Run::new("train-gate", &a, a.seed, &[&a.deltas], &a.out)?;
    let set = load_deltas(&a.deltas)?;
    let labels = label_deltas(&set.deltas())?;
    let g = train_gate(a.arch, set.layer, &set.x, &labels.labels, a.seed)?;
    let file = save_gate(&run, &g)?;
    run.write_json(
        &format!("gate_L{}_{}.json", g.layer, g.arch.name()),
        &json!({
            "layer": g.layer,
            "arch": g.arch,
            "n_params": g.n_params(),
            "threshold": g.threshold,
            "train_auc": g.train_auc,
            "label_rule": labels.rule,
            "label_threshold": labels.threshold,
            "file": file,
        }),
    )?;
    Ok(())
}

fn gate_eval(a: EvalGateArgs) -> Result<()> {
    let inputs: [&Path; 4] = [&a.model, &a.corpus.corpus, &a.surrogate, &a.gate];
    let run = Run::new("eval-gate", &a, a.seed, &inputs, &a.out)?;
    let model = load_model(&a.model)?;
    let c = a.corpus.load()?;
    let s = Arc::new(load_surrogate(&a.surrogate)?);
    let g = Arc::new(load_gate(&a.gate)?);
    if g.layer != s.layer {
        bail!(
            "gate is for layer {} but the surrogate is for layer {}",
            g.layer,
            s.layer
        );
    }
    let arch = g.arch;
    let mut r = eval_gated_at(
        &model,
        &s,
        g as Arc<dyn RoutingGate>,
        &c.tokens,
        c.splits.eval,
        a.threshold,
    )?;
    r.arch = Some(arch);
    run.write_json(&format!("eval_gate_L{}_{}.json", r.layer, arch.name()), &r)?;
    Ok(())
}

fn compound(a: CompoundArgs) -> Result<()> {
    let mut paths: Vec<(PathBuf, PathBuf)> = Vec::new();
    for p in &a.pairs {
        let (s, g) = p
            .split_once('=')
            .with_context(|| format!("--pair `{p}` is not SURROGATE=GATE"))?;
        paths.push((PathBuf::from(s), PathBuf::from(g)));
    }
    let mut inputs: Vec<&Path> = vec![&a.model, &a.corpus.corpus];
    for (s, g) in &paths {
        inputs.push(s);
        inputs.push(g);
    }
    let run = Run::new("compound", &a, a.seed, &inputs, &a.out)?;
    let model = load_model(&a.model)?;
    let c = a.corpus.load()?;
    let mut entries: Vec<(Arc<Surrogate64>, Arc<dyn RoutingGate>)> = Vec::new();
    for (sp, gp) in &paths {
        let s = load_surrogate(sp)?;
        let g = load_gate(gp)?;
        if g.layer != s.layer {
            bail!(
                "{} is for layer {} but {} is for layer {}",
                gp.display(),
                g.layer,
                sp.display(),
                s.layer
            );
        }
        entries.push((Arc::new(s), Arc::new(g)));
    }
    let r = compound_gating(&model, &entries, &c.tokens, c.splits.eval)?;
    run.write_json("compound.json", &r)?;
    Ok(())
}

fn stage_splits(c: &data::Corpus) -> StageSplits {
    StageSplits {
        fit: c.splits.fit,
        train: c.splits.gate,
        eval: c.splits.eval,
    }
}

fn progressive(a: ProgressiveArgs) -> Result<()> {
    let run = Run::new(
        "progressive",
        &a,
        a.seed,
        &[&a.model, &a.corpus.corpus],
        &a.out,
    )?;
    let model = load_model(&a.model)?;
    let c = a.corpus.load()?;
    let order = match a.n {
        Some(n) => center_outward_order(model.config.n_layers, n)?,
        None if !a.order.is_empty() => a.order.clone(),
        None => bail!("give either --n or --order"),
    };
    let plan = LinearizationPlan {
        order,
        ft_steps_per_layer: a.ft_steps,
        final_ft_steps: a.final_ft_steps,
        train_config: TrainConfig {
            batch_size: a.batch,
            lr: a.lr,
            schedule: Schedule::Constant,
            seed: a.seed,
            ..TrainConfig::default()
        },
        lambda: a.lambda,
    };
    let o = progressive_linearize(&model, &plan, &c.tokens, stage_splits(&c))?;
    let rows: Vec<Vec<String>> = o
        .stages
        .iter()
        .map(|s| {
            vec![
                s.n_linearized.to_string(),
                s.layer_added.to_string(),
                f(s.ppl_after_ft),
                f(s.delta_pct),
            ]
        })
        .collect();
    run.write_csv(
        "progressive.csv",
        &["n_linearized", "layer", "ppl", "delta_pct"],
        &rows,
    )?;
    save_model(&run, &o.model, "progressive_model.lmln")?;
    for s in &o.surrogates {
        save_surrogate(&run, s)?;
    }
    run.write_json(
        "progressive.json",
        &json!({
            "plan": plan,
            "ppl_base": o.ppl_base,
            "stages": o.stages,
            "final_ppl": o.final_ppl,
            "final_delta_pct": o.final_delta_pct,
        }),
    )?;
    Ok(())
}

fn two_phase_cmd(a: TwoPhaseArgs) -> Result<()> {
    let run = Run::new(
        "two-phase",
        &a,
        a.seed,
        &[&a.model, &a.corpus.corpus],
        &a.out,
    )?;
    let model = load_model(&a.model)?;
    let c = a.corpus.load()?;
    let base = TrainConfig {
        batch_size: a.batch,
        schedule: Schedule::Constant,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let cfg = TwoPhaseConfig {
        layers: a.layers.clone(),
        phase1: TrainConfig {
            lr: a.phase1_lr,
            steps: a.phase1_steps,
            ..base.clone()
        },
        phase2: TrainConfig {
            lr: a.phase2_lr,
            steps: a.phase2_steps,
            weight_decay: 0.0,
            ..base
        },
        lambda: a.lambda,
        gate_hidden: a.gate_hidden,
        gate_seed: a.seed,
    };
    let o = two_phase(&model, &cfg, &c.tokens, stage_splits(&c))?;
    let rows: Vec<Vec<String>> = o
        .phase1_trace
        .iter()
        .map(|r| vec!["1".into(), r.step.to_string(), f(r.loss)])
        .chain(
            o.phase2_trace
                .iter()
                .map(|r| vec!["2".into(), r.step.to_string(), f(r.loss)]),
        )
        .collect();
    run.write_csv("two_phase_loss.csv", &["phase", "step", "loss"], &rows)?;
    run.write_json(
        "two_phase.json",
        &json!({
            "layers": cfg.layers,
            "ppl_base": o.ppl_base,
            "ppl_phase1": o.ppl_phase1,
            "ppl_final": o.ppl_final,
            "delta_pct_phase1": o.delta_pct_phase1,
            "delta_pct_final": o.delta_pct_final,
            "mean_gate": o.mean_gate,
            "pct_effective_linear": o.pct_effective_linear,
            "gate_params": o.gates.iter().map(|g| g.n_params()).sum::<usize>(),
        }),
    )?;
    Ok(())
}

fn pipeline_cmd(a: PipelineArgs) -> Result<()> {
    let run = Run::new(
        "pipeline",
        &a,
        a.seed,
        &[&a.model, &a.corpus.corpus],
        &a.out,
    )?;
    let model = load_model(&a.model)?;
    let c = a.corpus.load()?;
    let layers: Vec<usize> = if a.layer.is_empty() {
        (0..model.config.n_layers).collect()
    } else {
        a.layer.clone()
    };
    let results: Vec<pipeline::LayerArtifacts> = layers
        .par_iter()
        .map(|&l| run_layer(&run, &model, &c, l, a.lambda, &a.arch, a.seed))
        .collect::<Result<_>>()?;
    for r in &results {
        run.write_json(&format!("layer_L{}.json", r.result.layer), &r.result)?;
    }
    let entries: Vec<(Arc<Surrogate64>, Arc<dyn RoutingGate>)> = results
        .iter()
        .filter_map(|r| {
            r.result.best.map(|b| {
                (
                    r.surrogate.clone(),
                    r.gates[b].clone() as Arc<dyn RoutingGate>,
                )
            })
        })
        .collect();
    let compound = compound_gating(&model, &entries, &c.tokens, c.splits.eval)?;
    run.write_json("compound.json", &compound)?;
    let layer_results: Vec<LayerResult> = results.into_iter().map(|r| r.result).collect();
    write_report(&run, &layer_results)?;
    run.write_json(
        "pipeline.json",
        &json!({
            "splits": c.splits,
            "n_tokens": c.tokens.len(),
            "layers": layers,
            "compound_delta_pct": compound.delta_pct,
            "compound_mean_pct_linear": compound.mean_pct_linear,
            "mlp_flops_saved_pct": compound.flops.mlp_flops_saved_pct,
            "total_flops_saved_pct": compound.flops.total_flops_saved_pct,
        }),
    )?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let inputs: Vec<&Path> = a.inputs.iter().map(PathBuf::as_path).collect();
    for p in &inputs {
        require(p, "input")?;
    }
    let run = Run::new("report", &a, a.seed, &inputs, &a.out)?;
    let layers = a
        .inputs
        .iter()
        .map(|p| {
            let v = read_result(p)?;
            serde_json::from_value::<LayerResult>(v)
                .with_context(|| format!("{} is not a per-layer result", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    write_report(&run, &layers)
}
