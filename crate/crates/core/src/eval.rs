//! Windowed next-token evaluation shared by every perplexity measurement.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::capture::SplitRange;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{cross_entropy, CaptureRequest, MlpOverride, Model};
use crate::scalar::Scalar;

/// Per-position results of one pass over a split.
///
/// The split is cut into non-overlapping `max_seq` windows; inside a window
/// position `t` predicts token `t + 1`, so the last position of every window
/// is not scored.
#[derive(Clone, Debug)]
pub struct EvalPass<T> {
    /// Next-token cross-entropy (nats) per predicted position.
    pub losses: Vec<f64>,
    pub stream_positions: Vec<usize>,
    pub positions: Vec<usize>,
    pub token_ids: Vec<u32>,
    /// Entropy of the predicted next-token distribution.
    pub entropies: Vec<f64>,
    /// MLP inputs at predicted positions, per requested layer.
    pub inputs: BTreeMap<usize, Matrix<T>>,
    /// Per hard-gated layer: positions sent to the linear path, out of all
    /// positions of the split (scored or not).
    pub routed_linear: BTreeMap<usize, usize>,
    pub routed_total: BTreeMap<usize, usize>,
    /// Per soft-gated layer: gate values over all positions.
    pub gate_values: BTreeMap<usize, Vec<f64>>,
}

impl<T: Scalar> EvalPass<T> {
    pub fn n_predicted(&self) -> usize {
        self.losses.len()
    }

    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }

    pub fn ppl(&self) -> f64 {
        perplexity(&self.losses)
    }

    pub fn pct_linear(&self, layer: usize) -> Option<f64> {
        let total = *self.routed_total.get(&layer)?;
        Some(self.routed_linear[&layer] as f64 / total as f64)
    }
}

/// `exp` of the mean loss, accumulated in order.
pub fn perplexity(losses: &[f64]) -> f64 {
    (losses.iter().sum::<f64>() / losses.len() as f64).exp()
}

/// Percentage change of `other` relative to `base`; positive means worse.
pub fn delta_pct(base: f64, other: f64) -> f64 {
    100.0 * (other / base - 1.0)
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    tokens: &[u32],
    split: SplitRange,
    overrides: &[MlpOverride<T>],
    capture_layers: &[usize],
) -> Result<EvalPass<T>> {
    if split.end > tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "split {}..{} past the end of {} tokens",
            split.start,
            split.end,
            tokens.len()
        )));
    }
    let req = CaptureRequest::layers(capture_layers);
    let windows: Vec<SplitRange> = split.windows(model.config.max_seq);
    let outs: Vec<_> = windows
        .par_iter()
        .map(|w| model.forward(&tokens[w.start..w.end], overrides, &req))
        .collect::<Result<_>>()?;

    let d = model.config.d_model;
    let mut pass = EvalPass {
        losses: Vec::new(),
        stream_positions: Vec::new(),
        positions: Vec::new(),
        token_ids: Vec::new(),
        entropies: Vec::new(),
        inputs: capture_layers
            .iter()
            .map(|&l| (l, Matrix::zeros(0, d)))
            .collect(),
        routed_linear: BTreeMap::new(),
        routed_total: BTreeMap::new(),
        gate_values: BTreeMap::new(),
    };
    let mut inputs: BTreeMap<usize, Vec<T>> = BTreeMap::new();
    for (w, out) in windows.iter().zip(outs) {
        let win = &tokens[w.start..w.end];
        for t in 0..win.len().saturating_sub(1) {
            let logits = out.logits.row(t);
            let loss = cross_entropy(logits, win[t + 1] as usize);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "stream position {}",
                    w.start + t
                )));
            }
            pass.losses.push(loss);
            pass.entropies.push(entropy(logits));
            pass.stream_positions.push(w.start + t);
            pass.positions.push(t);
            pass.token_ids.push(win[t]);
            for (&l, cap) in &out.captures {
                inputs.entry(l).or_default().extend_from_slice(cap.x.row(t));
            }
        }
        for (l, r) in out.routing {
            *pass.routed_linear.entry(l).or_default() += r.iter().filter(|&&b| b).count();
            *pass.routed_total.entry(l).or_default() += r.len();
        }
        for (l, g) in out.gate_values {
            pass.gate_values.entry(l).or_default().extend(g);
        }
    }
    for (l, data) in inputs {
        let n = data.len() / d;
        pass.inputs.insert(l, Matrix::from_vec(n, d, data)?);
    }
    if pass.losses.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split {}..{} has no predicted positions",
            split.start, split.end
        )));
    }
    Ok(pass)
}

fn entropy(logits: &[f64]) -> f64 {
    let lp = crate::model::log_softmax(logits);
    -lp.iter()
        .map(|&l| {
            if l == f64::NEG_INFINITY {
                0.0
            } else {
                l.exp() * l
            }
        })
        .sum::<f64>()
}
