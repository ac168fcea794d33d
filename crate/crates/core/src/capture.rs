//! Corpus splits, windowing, and per-position MLP activation capture.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::io::Dtype;
use crate::model::{CaptureRequest, Container, MlpOverride, Model, Tensor};
use crate::scalar::Scalar;

/// Half-open token range `[start, end)` over a token stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRange {
    pub start: usize,
    pub end: usize,
}

impl SplitRange {
    pub fn new(start: usize, end: usize) -> Self {
        SplitRange { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overlaps(&self, other: &SplitRange) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// Consecutive non-overlapping windows of at most `max_seq` tokens.
    pub fn windows(&self, max_seq: usize) -> Vec<SplitRange> {
        (self.start..self.end)
            .step_by(max_seq.max(1))
            .map(|s| SplitRange::new(s, (s + max_seq).min(self.end)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplits {
    pub fit: SplitRange,
    pub gate: SplitRange,
    pub eval: SplitRange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSpec {
    /// Tokens 0–10K fit, 10K–30K gate training, 30K–80K evaluation.
    Standard,
    /// The same 1:2:5 proportions stretched over the whole stream.
    Scaled,
    Explicit(CorpusSplits),
}

pub const STANDARD_SPLITS: CorpusSplits = CorpusSplits {
    fit: SplitRange {
        start: 0,
        end: 10_000,
    },
    gate: SplitRange {
        start: 10_000,
        end: 30_000,
    },
    eval: SplitRange {
        start: 30_000,
        end: 80_000,
    },
};

pub fn make_splits(stream_len: usize, spec: SplitSpec) -> Result<CorpusSplits> {
    let splits = match spec {
        SplitSpec::Standard => STANDARD_SPLITS,
        SplitSpec::Scaled => {
            let fit_end = stream_len * 10 / 80;
            let gate_end = stream_len * 30 / 80;
            CorpusSplits {
                fit: SplitRange::new(0, fit_end),
                gate: SplitRange::new(fit_end, gate_end),
                eval: SplitRange::new(gate_end, stream_len),
            }
        }
        SplitSpec::Explicit(s) => s,
    };
    let parts = [
        ("fit", splits.fit),
        ("gate", splits.gate),
        ("eval", splits.eval),
    ];
    for (name, r) in parts {
        if r.start > r.end {
            return Err(Error::InvalidArgument(format!(
                "{name} split is reversed: {r:?}"
            )));
        }
        if r.end > stream_len {
            return Err(Error::InvalidArgument(format!(
                "{name} split {}..{} runs past the end of a {stream_len}-token stream",
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
    Ok(splits)
}

/// Per-position MLP captures for one layer, one row per position, ordered by
/// (window, position).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecords<T> {
    pub layer: usize,
    /// Post-LN MLP input.
    pub x: Matrix<T>,
    /// MLP output.
    pub y: Matrix<T>,
    /// Token embedding, plus the learned position embedding when present.
    pub e: Matrix<T>,
    /// `x − e`, nudged by at most a few ulps so that `e + c == x` exactly.
    pub c: Matrix<T>,
    pub token_ids: Vec<u32>,
    /// Index within the window.
    pub positions: Vec<usize>,
    /// Index within the token stream.
    pub stream_positions: Vec<usize>,
    /// Coordinates where no representable `c` gives `e + c == x`; those miss
    /// by one rounding step.
    pub inexact: usize,
}

impl<T: Scalar> ActivationRecords<T> {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        ActivationRecords {
            layer: self.layer,
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            e: self.e.select_rows(idx),
            c: self.c.select_rows(idx),
            token_ids: idx.iter().map(|&i| self.token_ids[i]).collect(),
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            stream_positions: idx.iter().map(|&i| self.stream_positions[i]).collect(),
            inexact: self.inexact,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({ "kind": "activation_records" }));
        c.meta = Some(json!({ "layer": self.layer, "inexact": self.inexact }));
        for (name, m) in [
            ("x", &self.x),
            ("y", &self.y),
            ("e", &self.e),
            ("c", &self.c),
        ] {
            c.insert(name, Dtype::F64, Tensor::from_matrix(&m.cast()));
        }
        let ids = self.token_ids.iter().map(|&t| t as f64).collect();
        c.insert("token_ids", Dtype::F64, Tensor::vector(ids));
        let pos = self.positions.iter().map(|&p| p as f64).collect();
        c.insert("positions", Dtype::F64, Tensor::vector(pos));
        let sp = self.stream_positions.iter().map(|&p| p as f64).collect();
        c.insert("stream_positions", Dtype::F64, Tensor::vector(sp));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c
            .meta
            .as_ref()
            .ok_or_else(|| Error::Format("activation container has no meta".into()))?;
        let layer = meta["layer"]
            .as_u64()
            .ok_or_else(|| Error::Format("meta.layer missing".into()))?
            as usize;
        let mat = |n: &str| -> Result<Matrix<T>> { Ok(c.get(n)?.to_matrix().cast()) };
        let ints = |n: &str| -> Result<Vec<usize>> {
            Ok(c.get(n)?.data.iter().map(|&v| v as usize).collect())
        };
        Ok(ActivationRecords {
            layer,
            x: mat("x")?,
            y: mat("y")?,
            e: mat("e")?,
            c: mat("c")?,
            token_ids: ints("token_ids")?.into_iter().map(|t| t as u32).collect(),
            positions: ints("positions")?,
            stream_positions: ints("stream_positions")?,
            inexact: meta["inexact"].as_u64().unwrap_or(0) as usize,
        })
    }
}

/// Smallest adjustment of `x − e` for which `e + c` rounds back to `x`.
fn exact_residual<T: Scalar>(x: T, e: T) -> Option<T> {
    let c0 = x - e;
    if e + c0 == x {
        return Some(c0);
    }
    let (mut up, mut down) = (c0, c0);
    for _ in 0..4 {
        up = up.next(true);
        down = down.next(false);
        if e + up == x {
            return Some(up);
        }
        if e + down == x {
            return Some(down);
        }
    }
    None
}

/// Records for every position of `split`, captured in non-overlapping
/// `max_seq` windows.
pub fn capture_activations<T: Scalar>(
    model: &Model<T>,
    tokens: &[u32],
    layer: usize,
    split: SplitRange,
) -> Result<ActivationRecords<T>> {
    capture_activations_with(model, tokens, layer, split, &[])
}

/// As [`capture_activations`], with `overrides` active during the passes.
pub fn capture_activations_with<T: Scalar>(
    model: &Model<T>,
    tokens: &[u32],
    layer: usize,
    split: SplitRange,
    overrides: &[MlpOverride<T>],
) -> Result<ActivationRecords<T>> {
    if layer >= model.config.n_layers {
        return Err(Error::LayerOutOfRange {
            layer,
            n_layers: model.config.n_layers,
        });
    }
    if split.end > tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "split {}..{} past the end of {} tokens",
            split.start,
            split.end,
            tokens.len()
        )));
    }
    let req = CaptureRequest::layers(&[layer]);
    let per_window: Vec<_> = split
        .windows(model.config.max_seq)
        .into_par_iter()
        .map(|w| {
            model
                .forward(&tokens[w.start..w.end], overrides, &req)
                .map(|out| (w, out))
        })
        .collect::<Result<_>>()?;

    let d = model.config.d_model;
    let n = split.len();
    let mut rec = ActivationRecords {
        layer,
        x: Matrix::zeros(n, d),
        y: Matrix::zeros(n, d),
        e: Matrix::zeros(n, d),
        c: Matrix::zeros(n, d),
        token_ids: Vec::with_capacity(n),
        positions: Vec::with_capacity(n),
        stream_positions: Vec::with_capacity(n),
        inexact: 0,
    };
    let mut row = 0;
    for (w, out) in per_window {
        let cap = &out.captures[&layer];
        let emb = out.embeddings.as_ref().expect("embeddings captured");
        for t in 0..w.len() {
            rec.x.row_mut(row).copy_from_slice(cap.x.row(t));
            rec.y.row_mut(row).copy_from_slice(cap.y.row(t));
            rec.e.row_mut(row).copy_from_slice(emb.row(t));
            for j in 0..d {
                let (x, e) = (cap.x[(t, j)], emb[(t, j)]);
                rec.c.row_mut(row)[j] = match exact_residual(x, e) {
                    Some(c) => c,
                    None => {
                        rec.inexact += 1;
                        x - e
                    }
                };
            }
            rec.token_ids.push(tokens[w.start + t]);
            rec.positions.push(t);
            rec.stream_positions.push(w.start + t);
            row += 1;
        }
    }
    Ok(rec)
}
