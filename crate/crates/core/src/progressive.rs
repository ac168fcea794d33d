//! Progressive (one layer at a time) and two-phase gated linearization.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::capture::{capture_activations_with, SplitRange};
use crate::error::{Error, Result};
use crate::eval::{delta_pct, evaluate};
use crate::linalg::stats::mean;
use crate::model::{MlpOverride, Model, SoftGate};
use crate::scalar::Scalar;
use crate::surrogate::{fit_surrogate, LinearSurrogate};
use crate::training::{all_model_params, finetune, StepRecord, TrainConfig};

/// Starts at `n_layers / 2` and alternates −1, +1, −2, +2, ...; the upward
/// side stops after `⌈n / 4⌉` steps, after which the order continues
/// downward (and upward again only if the bottom is reached).
pub fn center_outward_order(n_layers: usize, n: usize) -> Result<Vec<usize>> {
    if n > n_layers {
        return Err(Error::InvalidArgument(format!(
            "cannot linearize {n} of {n_layers} layers"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let center = n_layers / 2;
    let up_cap = n.div_ceil(4);
    let mut order = vec![center];
    let (mut down, mut up) = (center, center);
    let mut go_down = true;
    while order.len() < n {
        let can_down = down > 0;
        let can_up_capped = up + 1 < n_layers && up - center < up_cap;
        let take_down = if go_down {
            can_down
        } else {
            !can_up_capped && can_down
        };
        if take_down {
            down -= 1;
            order.push(down);
        } else if up + 1 < n_layers && (can_up_capped || !can_down) {
            up += 1;
            order.push(up);
        } else {
            unreachable!("n <= n_layers leaves a layer on some side");
        }
        go_down = !go_down || !can_up_capped;
    }
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizationPlan {
    pub order: Vec<usize>,
    pub ft_steps_per_layer: usize,
    pub final_ft_steps: usize,
    /// `steps` is overridden per stage.
    pub train_config: TrainConfig,
    pub lambda: f64,
}

impl LinearizationPlan {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let mut seen = vec![false; n_layers];
        for &l in &self.order {
            if l >= n_layers {
                return Err(Error::LayerOutOfRange { layer: l, n_layers });
            }
            if std::mem::replace(&mut seen[l], true) {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} listed twice in plan"
                )));
            }
        }
        self.train_config.validate()
    }
}

/// Disjoint token ranges: surrogate fitting, fine-tuning, evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSplits {
    pub fit: SplitRange,
    pub train: SplitRange,
    pub eval: SplitRange,
}

impl StageSplits {
    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        let parts = [
            ("fit", self.fit),
            ("train", self.train),
            ("eval", self.eval),
        ];
        for (name, r) in parts {
            if r.is_empty() || r.end > n_tokens {
                return Err(Error::InvalidArgument(format!(
                    "{name} split {}..{} unusable for {n_tokens} tokens",
                    r.start, r.end
                )));
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                if parts[i].1.overlaps(&parts[j].1) {
                    return Err(Error::InvalidArgument(format!(
                        "{} and {} splits overlap",
                        parts[i].0, parts[j].0
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub n_linearized: usize,
    pub layer_added: usize,
    pub ppl_after_ft: f64,
    /// Relative to the input model's perplexity.
    pub delta_pct: f64,
    pub train_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ProgressiveOutcome<T> {
    pub ppl_base: f64,
    pub stages: Vec<StageRecord>,
    pub final_ppl: f64,
    pub final_delta_pct: f64,
    pub model: Model<T>,
    pub surrogates: Vec<Arc<LinearSurrogate<T>>>,
    pub final_trace: Vec<StepRecord>,
}

fn stage_error(e: Error, stage: &str) -> Error {
    match e {
        Error::NonFiniteLoss(at) => Error::NonFiniteLoss(format!("{stage}, {at}")),
        e => e,
    }
}

fn linear_overrides<T: Scalar>(s: &[Arc<LinearSurrogate<T>>]) -> Vec<MlpOverride<T>> {
    s.iter()
        .map(|s| MlpOverride::all_linear(s.clone()))
        .collect()
}

/// Fits the surrogate for `layer` on the current model with the already
/// linearized layers active.
fn fit_stage<T: Scalar>(
    model: &Model<T>,
    tokens: &[u32],
    layer: usize,
    fit: SplitRange,
    active: &[Arc<LinearSurrogate<T>>],
    lambda: f64,
) -> Result<Arc<LinearSurrogate<T>>> {
    let rec = capture_activations_with(model, tokens, layer, fit, &linear_overrides(active))?;
    Ok(Arc::new(fit_surrogate(&rec, lambda)?))
}

/// Replaces MLPs in `plan.order`, one per stage: fit the surrogate on the
/// current model, freeze it, fine-tune the rest, evaluate. A final
/// fine-tuning pass follows the last stage.
pub fn progressive_linearize<T: Scalar>(
    model: &Model<T>,
    plan: &LinearizationPlan,
    tokens: &[u32],
    splits: StageSplits,
) -> Result<ProgressiveOutcome<T>> {
    plan.validate(model.config.n_layers)?;
    splits.validate(tokens.len())?;
    let mut model = model.clone();
    let ppl_base = evaluate(&model, tokens, splits.eval, &[], &[])?.ppl();
    let mut surrogates: Vec<Arc<LinearSurrogate<T>>> = Vec::new();
    let mut stages = Vec::with_capacity(plan.order.len());
    for (i, &layer) in plan.order.iter().enumerate() {
        let s = fit_stage(&model, tokens, layer, splits.fit, &surrogates, plan.lambda)?;
        surrogates.push(s);
        let mut overrides = linear_overrides(&surrogates);
        let cfg = TrainConfig {
            steps: plan.ft_steps_per_layer,
            ..plan.train_config.clone()
        };
        let trace = finetune(&mut model, tokens, splits.train, &mut overrides, &cfg)
            .map_err(|e| stage_error(e, &format!("stage {} (layer {layer})", i + 1)))?;
        let ppl = evaluate(&model, tokens, splits.eval, &overrides, &[])?.ppl();
        stages.push(StageRecord {
            n_linearized: i + 1,
            layer_added: layer,
            ppl_after_ft: ppl,
            delta_pct: delta_pct(ppl_base, ppl),
            train_loss: trace.last().map(|r| r.loss),
        });
    }
    let mut overrides = linear_overrides(&surrogates);
    let cfg = TrainConfig {
        steps: plan.final_ft_steps,
        ..plan.train_config.clone()
    };
    let final_trace = finetune(&mut model, tokens, splits.train, &mut overrides, &cfg)
        .map_err(|e| stage_error(e, "final fine-tuning"))?;
    let final_ppl = evaluate(&model, tokens, splits.eval, &overrides, &[])?.ppl();
    Ok(ProgressiveOutcome {
        ppl_base,
        stages,
        final_ppl,
        final_delta_pct: delta_pct(ppl_base, final_ppl),
        model,
        surrogates,
        final_trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoPhaseConfig {
    pub layers: Vec<usize>,
    pub phase1: TrainConfig,
    pub phase2: TrainConfig,
    pub lambda: f64,
    /// Hidden width of each soft gate; 0 is the `d + 1` linear gate.
    pub gate_hidden: usize,
    pub gate_seed: u64,
}

#[derive(Clone, Debug)]
pub struct TwoPhaseOutcome<T> {
    pub ppl_base: f64,
    pub ppl_phase1: f64,
    /// Soft blend at evaluation time.
    pub ppl_final: f64,
    pub delta_pct_phase1: f64,
    pub delta_pct_final: f64,
    pub mean_gate: BTreeMap<usize, f64>,
    /// Mean of `1 − g` over layers and positions.
    pub pct_effective_linear: f64,
    pub phase1_trace: Vec<StepRecord>,
    pub phase2_trace: Vec<StepRecord>,
    pub model: Model<T>,
    pub surrogates: Vec<Arc<LinearSurrogate<T>>>,
    pub gates: Vec<SoftGate<T>>,
}

impl<T: Scalar> TwoPhaseOutcome<T> {
    pub fn soft_overrides(&self) -> Vec<MlpOverride<T>> {
        self.surrogates
            .iter()
            .zip(&self.gates)
            .map(|(s, g)| MlpOverride::soft_gated(s.clone(), g.clone()))
            .collect()
    }
}

/// Phase 1 linearizes `cfg.layers` (surrogates fit in order on the current
/// model) and fine-tunes the unfrozen parameters; phase 2 freezes every
/// model tensor and trains only the per-layer soft gates.
pub fn two_phase<T: Scalar>(
    model: &Model<T>,
    cfg: &TwoPhaseConfig,
    tokens: &[u32],
    splits: StageSplits,
) -> Result<TwoPhaseOutcome<T>> {
    LinearizationPlan {
        order: cfg.layers.clone(),
        ft_steps_per_layer: 0,
        final_ft_steps: 0,
        train_config: cfg.phase1.clone(),
        lambda: cfg.lambda,
    }
    .validate(model.config.n_layers)?;
    cfg.phase2.validate()?;
    splits.validate(tokens.len())?;
    let mut model = model.clone();
    let ppl_base = evaluate(&model, tokens, splits.eval, &[], &[])?.ppl();
    let mut surrogates = Vec::with_capacity(cfg.layers.len());
    for &layer in &cfg.layers {
        let s = fit_stage(&model, tokens, layer, splits.fit, &surrogates, cfg.lambda)?;
        surrogates.push(s);
    }
    let mut overrides = linear_overrides(&surrogates);
    let phase1_trace = finetune(
        &mut model,
        tokens,
        splits.train,
        &mut overrides,
        &cfg.phase1,
    )
    .map_err(|e| stage_error(e, "phase 1"))?;
    let ppl_phase1 = evaluate(&model, tokens, splits.eval, &overrides, &[])?.ppl();

    let d = model.config.d_model;
    let mut overrides: Vec<MlpOverride<T>> = surrogates
        .iter()
        .map(|s| {
            let gate = SoftGate::with_hidden(d, cfg.gate_hidden, cfg.gate_seed ^ s.layer as u64);
            MlpOverride::soft_gated(s.clone(), gate)
        })
        .collect();
    let mut p2 = cfg.phase2.clone();
    p2.frozen.extend(all_model_params(&model));
    let phase2_trace = finetune(&mut model, tokens, splits.train, &mut overrides, &p2)
        .map_err(|e| stage_error(e, "phase 2"))?;
    let pass = evaluate(&model, tokens, splits.eval, &overrides, &[])?;
    let mean_gate: BTreeMap<usize, f64> = pass
        .gate_values
        .iter()
        .map(|(&l, g)| (l, mean(g)))
        .collect();
    let lin: Vec<f64> = pass
        .gate_values
        .values()
        .flatten()
        .map(|g| 1.0 - g)
        .collect();
    let gates = overrides
        .into_iter()
        .map(|o| match o.kind {
            crate::model::OverrideKind::SoftGated { gate, .. } => gate,
            _ => unreachable!("phase 2 overrides are soft-gated"),
        })
        .collect();
    let ppl_final = pass.ppl();
    Ok(TwoPhaseOutcome {
        ppl_base,
        ppl_phase1,
        ppl_final,
        delta_pct_phase1: delta_pct(ppl_base, ppl_phase1),
        delta_pct_final: delta_pct(ppl_base, ppl_final),
        mean_gate,
        pct_effective_linear: if lin.is_empty() { 0.0 } else { mean(&lin) },
        phase1_trace,
        phase2_trace,
        model,
        surrogates,
        gates,
    })
}
