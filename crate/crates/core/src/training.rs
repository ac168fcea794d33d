//! Cross-entropy gradients, AdamW, and the fine-tuning loop.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capture::SplitRange;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{log_softmax, MlpOverride, Model, OverrideKind, Tensor};
use crate::scalar::Scalar;

pub type Grads<T> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Window length; `None` uses the model's `max_seq`.
    pub seq_len: Option<usize>,
    pub lr: f64,
    pub steps: usize,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Parameter names that receive no updates. Gate parameters are named
    /// `gate.{layer}.{w,c,v,b}`.
    pub frozen: BTreeSet<String>,
    /// Seed for the window order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            seq_len: None,
            lr: 1e-3,
            steps: 100,
            weight_decay: 0.01,
            schedule: Schedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            frozen: BTreeSet::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => cosine_lr(step, self.steps, self.lr),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be > 0".into()));
        }
        Ok(())
    }
}

/// `base_lr · ½(1 + cos(π·step/total))`; `total == 0` gives `base_lr`.
pub fn cosine_lr(step: usize, total: usize, base_lr: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let frac = step.min(total) as f64 / total as f64;
    base_lr * 0.5 * (1.0 + (PI * frac).cos())
}

/// Every model parameter name, for freezing a whole model.
pub fn all_model_params<T: Scalar>(model: &Model<T>) -> BTreeSet<String> {
    model.params.keys().cloned().collect()
}

/// Mean next-token cross-entropy over every predicted position of the batch
/// and its gradients, minus frozen names.
///
/// Sequences are processed in parallel; per-sequence gradients are summed in
/// batch order so the result does not depend on scheduling.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    batch: &[&[u32]],
    overrides: &[MlpOverride<T>],
    frozen: &BTreeSet<String>,
) -> Result<(f64, Grads<T>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n_pred: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if n_pred == 0 {
        return Err(Error::InvalidArgument(
            "batch has no predicted positions (sequences shorter than 2)".into(),
        ));
    }
    let scale = 1.0 / n_pred as f64;
    let all_frozen = model.params.keys().all(|k| frozen.contains(k))
        && !overrides
            .iter()
            .any(|o| matches!(o.kind, OverrideKind::SoftGated { .. }));

    let per_seq: Vec<(f64, Option<Grads<T>>)> = batch
        .par_iter()
        .map(|seq| -> Result<(f64, Option<Grads<T>>)> {
            if seq.len() < 2 {
                return Ok((0.0, None));
            }
            let (out, cache) =
                model.forward_with_cache(seq, overrides, &crate::model::CaptureRequest::none())?;
            let vocab = model.config.vocab_size;
            let mut loss = 0.0;
            let mut dlogits = Matrix::<f64>::zeros(seq.len(), vocab);
            for t in 0..seq.len() - 1 {
                let lp = log_softmax(out.logits.row(t));
                let target = seq[t + 1] as usize;
                loss -= lp[target];
                let row = dlogits.row_mut(t);
                for (g, &l) in row.iter_mut().zip(&lp) {
                    *g = l.exp() * scale;
                }
                row[target] -= scale;
            }
            if all_frozen {
                return Ok((loss, None));
            }
            let grads = model.backward(&cache, overrides, &dlogits)?;
            Ok((loss, Some(grads)))
        })
        .collect::<Result<_>>()?;

    let mut total = 0.0;
    let mut grads: Grads<T> = BTreeMap::new();
    for (loss, g) in per_seq {
        total += loss;
        for (name, t) in g.into_iter().flatten() {
            if frozen.contains(&name) {
                continue;
            }
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss("batch loss".into()));
    }
    Ok((loss, grads))
}

/// First and second moment estimates, kept in `f64`.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update of a single tensor at (1-based) step `t`.
fn adamw_tensor<T: Scalar>(
    name: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) {
    let n = param.len();
    let m = state
        .m
        .entry(name.to_string())
        .or_insert_with(|| vec![0.0; n]);
    let v = state
        .v
        .entry(name.to_string())
        .or_insert_with(|| vec![0.0; n]);
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let g = grad.data[i].wide();
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        let p = param.data[i].wide();
        let p = p - lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p);
        param.data[i] = T::of(p);
    }
}

/// AdamW over every named gradient. Names are resolved against the model
/// first, then against soft gates in `overrides` (`gate.{layer}.{name}`).
pub fn adamw_step<T: Scalar>(
    model: &mut Model<T>,
    overrides: &mut [MlpOverride<T>],
    grads: &Grads<T>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    for (name, g) in grads {
        if cfg.frozen.contains(name) {
            continue;
        }
        if let Some(p) = model.params.get_mut(name) {
            adamw_tensor(name, p, g, state, lr, cfg);
            continue;
        }
        let p =
            gate_param_mut(overrides, name).ok_or_else(|| Error::UnknownTensor(name.clone()))?;
        adamw_tensor(name, p, g, state, lr, cfg);
    }
    Ok(())
}

fn gate_param_mut<'a, T: Scalar>(
    overrides: &'a mut [MlpOverride<T>],
    name: &str,
) -> Option<&'a mut Tensor<T>> {
    let rest = name.strip_prefix("gate.")?;
    let (layer, pname) = rest.split_once('.')?;
    let layer: usize = layer.parse().ok()?;
    overrides
        .iter_mut()
        .find(|o| o.layer == layer)
        .and_then(|o| match &mut o.kind {
            OverrideKind::SoftGated { gate, .. } => gate.param_mut(pname),
            _ => None,
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Trains `model` (and any soft gates in `overrides`) in place on windows of
/// `tokens[range]`.
///
/// Windows are non-overlapping; their order is reshuffled with `cfg.seed`
/// every pass through the range.
pub fn finetune<T: Scalar>(
    model: &mut Model<T>,
    tokens: &[u32],
    range: SplitRange,
    overrides: &mut [MlpOverride<T>],
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    finetune_with(model, tokens, range, overrides, cfg, |_, _| Ok(()))
}

/// [`finetune`] with a hook called after every optimizer step, e.g. to write
/// intermediate checkpoints. An error from the hook stops training.
pub fn finetune_with<T: Scalar>(
    model: &mut Model<T>,
    tokens: &[u32],
    range: SplitRange,
    overrides: &mut [MlpOverride<T>],
    cfg: &TrainConfig,
    mut after_step: impl FnMut(&StepRecord, &Model<T>) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    if range.end > tokens.len() || range.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training range {}..{} unusable for {} tokens",
            range.start,
            range.end,
            tokens.len()
        )));
    }
    let seq_len = cfg
        .seq_len
        .unwrap_or(model.config.max_seq)
        .min(model.config.max_seq);
    let windows: Vec<SplitRange> = range
        .windows(seq_len)
        .into_iter()
        .filter(|w| w.len() >= 2)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut state = AdamState::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch: Vec<&[u32]> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let w = windows[order[cursor]];
            batch.push(&tokens[w.start..w.end]);
            cursor += 1;
        }
        let (loss, grads) =
            loss_and_grads(model, &batch, overrides, &cfg.frozen).map_err(|e| match e {
                Error::NonFiniteLoss(_) => Error::NonFiniteLoss(format!("training step {step}")),
                e => e,
            })?;
        let lr = cfg.lr_at(step);
        adamw_step(model, overrides, &grads, &mut state, lr, cfg)?;
        let rec = StepRecord { step, lr, loss };
        after_step(&rec, model)?;
        trace.push(rec);
    }
    Ok(trace)
}
