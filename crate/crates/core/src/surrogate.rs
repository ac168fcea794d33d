//! Per-layer affine stand-ins for the MLP, fitted by ridge regression.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::capture::{ActivationRecords, SplitRange};
use crate::error::{Error, Result};
use crate::eval::{delta_pct, evaluate};
use crate::linalg::{ridge_fit, Matrix};
use crate::model::io::Dtype;
use crate::model::{read_container, write_container, Container, MlpOverride, Model, Tensor};
use crate::scalar::Scalar;

pub const DEFAULT_LAMBDA: f64 = 0.01;

/// `f(x) = x W + b` with `x` a row vector; `weight` is `d_in × d_out`
/// (the transpose of the `[out, in]` layout used for model weights).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSurrogate<T> {
    pub layer: usize,
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub lambda: f64,
    pub n_fit: usize,
    pub fit_split: Option<SplitRange>,
}

impl<T: Scalar> LinearSurrogate<T> {
    /// Wraps an `[out, in]` affine map `y = A x + b`.
    pub fn from_affine(layer: usize, a: &Matrix<T>, b: Vec<T>) -> Self {
        LinearSurrogate {
            layer,
            weight: a.transpose(),
            bias: b,
            lambda: 0.0,
            n_fit: 0,
            fit_split: None,
        }
    }

    pub fn d_model(&self) -> usize {
        self.bias.len()
    }

    #[inline]
    pub fn apply_into(&self, x: &[T], out: &mut [T]) {
        out.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.weight.row(i)) {
                *o += xi * w;
            }
        }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.d_model()];
        self.apply_into(x, &mut out);
        out
    }

    pub fn apply_rows(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(x.rows(), self.d_model());
        for t in 0..x.rows() {
            self.apply_into(x.row(t), out.row_mut(t));
        }
        out
    }

    /// `dx += W dy`.
    #[inline]
    pub(crate) fn backward_input_into(&self, dy: &[T], dx: &mut [T]) {
        for (i, d) in dx.iter_mut().enumerate() {
            let mut s = T::zero();
            for (&w, &g) in self.weight.row(i).iter().zip(dy) {
                s += w * g;
            }
            *d += s;
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({ "kind": "linear_surrogate" }));
        c.meta = Some(json!({
            "layer": self.layer,
            "lambda": self.lambda,
            "n_fit": self.n_fit,
            "fit_split": self.fit_split,
        }));
        c.insert(
            "weight",
            Dtype::F64,
            Tensor::from_matrix(&self.weight.cast()),
        );
        c.insert(
            "bias",
            Dtype::F64,
            Tensor::vector(self.bias.iter().map(|v| v.wide()).collect()),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        #[derive(Deserialize, Serialize)]
        struct Meta {
            layer: usize,
            lambda: f64,
            n_fit: usize,
            fit_split: Option<SplitRange>,
        }
        let meta: Meta = serde_json::from_value(
            c.meta
                .clone()
                .ok_or_else(|| Error::Format("surrogate container has no meta".into()))?,
        )
        .map_err(|e| Error::Format(format!("surrogate meta: {e}")))?;
        let weight: Matrix<T> = c.get("weight")?.to_matrix().cast();
        let bias: Vec<T> = c.get("bias")?.data.iter().map(|&v| T::of(v)).collect();
        if weight.shape() != (bias.len(), bias.len()) {
            return Err(Error::Shape(format!(
                "surrogate weight {:?} with bias of length {}",
                weight.shape(),
                bias.len()
            )));
        }
        Ok(LinearSurrogate {
            layer: meta.layer,
            weight,
            bias,
            lambda: meta.lambda,
            n_fit: meta.n_fit,
            fit_split: meta.fit_split,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_container())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }
}

/// Ridge fit of `x → y` over every record.
pub fn fit_surrogate<T: Scalar>(
    records: &ActivationRecords<T>,
    lambda: f64,
) -> Result<LinearSurrogate<T>> {
    let fit = ridge_fit(&records.x, &records.y, lambda)?;
    let fit_split = match (
        records.stream_positions.first(),
        records.stream_positions.last(),
    ) {
        (Some(&a), Some(&b)) => Some(SplitRange::new(a, b + 1)),
        _ => None,
    };
    Ok(LinearSurrogate {
        layer: records.layer,
        weight: fit.weight,
        bias: fit.bias,
        lambda,
        n_fit: fit.n_samples,
        fit_split,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearEval {
    pub layer: usize,
    pub ppl_base: f64,
    pub ppl_linear: f64,
    pub delta_pct: f64,
    pub n_eval_tokens: usize,
}

/// Perplexity with and without the MLP at `surrogate.layer` replaced.
pub fn eval_all_linear<T: Scalar>(
    model: &Model<T>,
    surrogate: &Arc<LinearSurrogate<T>>,
    tokens: &[u32],
    split: SplitRange,
) -> Result<LinearEval> {
    if let Some(fit) = surrogate.fit_split {
        if fit.overlaps(&split) {
            return Err(Error::InvalidArgument(format!(
                "evaluation split {}..{} overlaps the fit split {}..{}",
                split.start, split.end, fit.start, fit.end
            )));
        }
    }
    let base = evaluate(model, tokens, split, &[], &[])?;
    let lin = evaluate(
        model,
        tokens,
        split,
        &[MlpOverride::all_linear(surrogate.clone())],
        &[],
    )?;
    let (ppl_base, ppl_linear) = (base.ppl(), lin.ppl());
    Ok(LinearEval {
        layer: surrogate.layer,
        ppl_base,
        ppl_linear,
        delta_pct: delta_pct(ppl_base, ppl_linear),
        n_eval_tokens: base.n_predicted(),
    })
}
