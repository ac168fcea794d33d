use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::Tensor;
use crate::scalar::Scalar;
use crate::surrogate::LinearSurrogate;

/// Scores an MLP input; hard routing sends the position to the linear path
/// when the score exceeds the override's threshold.
pub trait RoutingGate: Send + Sync + fmt::Debug {
    fn score(&self, x: &[f64]) -> f64;

    fn n_params(&self) -> usize {
        0
    }
}

/// Gate with a fixed output, used for the all-MLP and all-linear paths.
#[derive(Clone, Copy, Debug)]
pub struct ConstantGate(pub f64);

impl RoutingGate for ConstantGate {
    fn score(&self, _x: &[f64]) -> f64 {
        self.0
    }
}

/// Scores 1 when coordinate `index` exceeds `cut`, else 0.
#[derive(Clone, Copy, Debug)]
pub struct ThresholdGate {
    pub index: usize,
    pub cut: f64,
}

impl RoutingGate for ThresholdGate {
    fn score(&self, x: &[f64]) -> f64 {
        if x[self.index] > self.cut {
            1.0
        } else {
            0.0
        }
    }

    fn n_params(&self) -> usize {
        2
    }
}

/// Arbitrary frozen stand-in for an MLP. Not differentiable.
pub trait Replacement<T>: Send + Sync {
    fn apply(&self, x: &[T]) -> Vec<T>;
}

impl<T, F> Replacement<T> for F
where
    F: Fn(&[T]) -> Vec<T> + Send + Sync,
{
    fn apply(&self, x: &[T]) -> Vec<T> {
        self(x)
    }
}

/// Differentiable per-position gate blending the two paths:
/// `g·MLP(x) + (1 − g)·(x W + b)`.
///
/// Without a hidden layer `g = σ(w·x + b)`; with one,
/// `g = σ(v·ReLU(P x + c) + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftGate<T> {
    /// `[d]` for the linear gate, `[hidden, d]` otherwise.
    pub w: Tensor<T>,
    pub c: Option<Tensor<T>>,
    pub v: Option<Tensor<T>>,
    /// Shape `[1]`.
    pub b: Tensor<T>,
}

/// Forward intermediates of a [`SoftGate`] at one position.
#[derive(Clone, Debug)]
pub struct SoftGateTrace<T> {
    pub g: T,
    hidden_pre: Vec<T>,
}

impl<T: Scalar> SoftGate<T> {
    /// Linear gate at `g = 0.5` for every input.
    pub fn linear(d: usize) -> Self {
        SoftGate {
            w: Tensor::zeros(&[d]),
            c: None,
            v: None,
            b: Tensor::zeros(&[1]),
        }
    }

    /// Bottleneck gate of the given width, also starting at `g = 0.5`.
    pub fn with_hidden(d: usize, hidden: usize, seed: u64) -> Self {
        if hidden == 0 {
            return Self::linear(d);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let data = (0..hidden * d)
            .map(|_| T::of(dist.sample(&mut rng)))
            .collect();
        SoftGate {
            w: Tensor::new(&[hidden, d], data).expect("shape matches"),
            c: Some(Tensor::zeros(&[hidden])),
            v: Some(Tensor::zeros(&[hidden])),
            b: Tensor::zeros(&[1]),
        }
    }

    /// Gate pinned at exactly `g = 0` (`open = false`, all linear) or
    /// `g = 1` (`open = true`, all MLP).
    pub fn forced(d: usize, open: bool) -> Self {
        let mut g = Self::linear(d);
        g.b.data[0] = if open {
            T::infinity()
        } else {
            T::neg_infinity()
        };
        g
    }

    pub fn d_model(&self) -> usize {
        *self.w.shape.last().expect("gate weight has a shape")
    }

    pub fn hidden(&self) -> usize {
        if self.w.shape.len() == 2 {
            self.w.shape[0]
        } else {
            0
        }
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![("w", &self.w)];
        if let Some(c) = &self.c {
            out.push(("c", c));
        }
        if let Some(v) = &self.v {
            out.push(("v", v));
        }
        out.push(("b", &self.b));
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match name {
            "w" => Some(&mut self.w),
            "c" => self.c.as_mut(),
            "v" => self.v.as_mut(),
            "b" => Some(&mut self.b),
            _ => None,
        }
    }

    pub fn trace(&self, x: &[T]) -> SoftGateTrace<T> {
        let (logit, hidden_pre) = if self.hidden() == 0 {
            let mut s = self.b.data[0];
            for (&w, &xi) in self.w.data.iter().zip(x) {
                s += w * xi;
            }
            (s, Vec::new())
        } else {
            let c = self.c.as_ref().expect("hidden gate has c");
            let v = self.v.as_ref().expect("hidden gate has v");
            let pre: Vec<T> = (0..self.hidden())
                .map(|j| {
                    let mut s = c.data[j];
                    for (&w, &xi) in self.w.row(j).iter().zip(x) {
                        s += w * xi;
                    }
                    s
                })
                .collect();
            let mut s = self.b.data[0];
            for (&p, &vj) in pre.iter().zip(&v.data) {
                s += vj * p.max(T::zero());
            }
            (s, pre)
        };
        SoftGateTrace {
            g: sigmoid(logit),
            hidden_pre,
        }
    }

    pub fn value(&self, x: &[T]) -> T {
        self.trace(x).g
    }

    /// Accumulates parameter gradients for `dL/dlogit` and adds `dL/dx`.
    pub(crate) fn backward(
        &self,
        x: &[T],
        trace: &SoftGateTrace<T>,
        dlogit: T,
        grads: &mut SoftGate<T>,
        dx: &mut [T],
    ) {
        grads.b.data[0] += dlogit;
        if self.hidden() == 0 {
            for ((gw, dxi), (&w, &xi)) in grads
                .w
                .data
                .iter_mut()
                .zip(dx.iter_mut())
                .zip(self.w.data.iter().zip(x))
            {
                *gw += dlogit * xi;
                *dxi += dlogit * w;
            }
            return;
        }
        let v = self.v.as_ref().expect("hidden gate has v");
        let gv = grads.v.as_mut().expect("hidden grads have v");
        let mut dz = vec![T::zero(); self.hidden()];
        for j in 0..self.hidden() {
            let pre = trace.hidden_pre[j];
            gv.data[j] += dlogit * pre.max(T::zero());
            if pre > T::zero() {
                dz[j] = dlogit * v.data[j];
            }
        }
        let gc = grads.c.as_mut().expect("hidden grads have c");
        for j in 0..self.hidden() {
            if dz[j] == T::zero() {
                continue;
            }
            gc.data[j] += dz[j];
            let row = self.w.row(j);
            let grow = grads.w.row_mut(j);
            for k in 0..x.len() {
                grow[k] += dz[j] * x[k];
                dx[k] += dz[j] * row[k];
            }
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        SoftGate {
            w: Tensor::zeros(&self.w.shape),
            c: self.c.as_ref().map(|t| Tensor::zeros(&t.shape)),
            v: self.v.as_ref().map(|t| Tensor::zeros(&t.shape)),
            b: Tensor::zeros(&[1]),
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// What replaces the MLP at a layer.
#[derive(Clone)]
pub enum OverrideKind<T> {
    None,
    AllLinear(Arc<LinearSurrogate<T>>),
    HardGated {
        surrogate: Arc<LinearSurrogate<T>>,
        gate: Arc<dyn RoutingGate>,
        threshold: f64,
    },
    SoftGated {
        surrogate: Arc<LinearSurrogate<T>>,
        gate: SoftGate<T>,
    },
    Replace(Arc<dyn Replacement<T>>),
}

impl<T> fmt::Debug for OverrideKind<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OverrideKind::None => write!(f, "None"),
            OverrideKind::AllLinear(_) => write!(f, "AllLinear"),
            OverrideKind::HardGated {
                gate, threshold, ..
            } => {
                write!(f, "HardGated({gate:?}, threshold {threshold})")
            }
            OverrideKind::SoftGated { .. } => write!(f, "SoftGated"),
            OverrideKind::Replace(_) => write!(f, "Replace"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpOverride<T> {
    pub layer: usize,
    pub kind: OverrideKind<T>,
}

impl<T: Scalar> MlpOverride<T> {
    pub fn all_linear(surrogate: Arc<LinearSurrogate<T>>) -> Self {
        MlpOverride {
            layer: surrogate.layer,
            kind: OverrideKind::AllLinear(surrogate),
        }
    }

    pub fn hard_gated(surrogate: Arc<LinearSurrogate<T>>, gate: Arc<dyn RoutingGate>) -> Self {
        Self::hard_gated_at(surrogate, gate, 0.5)
    }

    pub fn hard_gated_at(
        surrogate: Arc<LinearSurrogate<T>>,
        gate: Arc<dyn RoutingGate>,
        threshold: f64,
    ) -> Self {
        MlpOverride {
            layer: surrogate.layer,
            kind: OverrideKind::HardGated {
                surrogate,
                gate,
                threshold,
            },
        }
    }

    pub fn soft_gated(surrogate: Arc<LinearSurrogate<T>>, gate: SoftGate<T>) -> Self {
        MlpOverride {
            layer: surrogate.layer,
            kind: OverrideKind::SoftGated { surrogate, gate },
        }
    }

    pub fn surrogate(&self) -> Option<&Arc<LinearSurrogate<T>>> {
        match &self.kind {
            OverrideKind::AllLinear(s)
            | OverrideKind::HardGated { surrogate: s, .. }
            | OverrideKind::SoftGated { surrogate: s, .. } => Some(s),
            OverrideKind::None | OverrideKind::Replace(_) => None,
        }
    }

    /// True when the layer's own MLP weights never contribute to the output.
    pub fn bypasses_mlp(&self) -> bool {
        matches!(
            self.kind,
            OverrideKind::AllLinear(_) | OverrideKind::Replace(_)
        )
    }
}

/// Per-layer lookup; rejects out-of-range and duplicate layers.
pub(crate) fn index_overrides<T: Scalar>(
    overrides: &[MlpOverride<T>],
    n_layers: usize,
    d_model: usize,
) -> Result<Vec<Option<&MlpOverride<T>>>> {
    let mut by_layer = vec![None; n_layers];
    for o in overrides {
        if o.layer >= n_layers {
            return Err(Error::LayerOutOfRange {
                layer: o.layer,
                n_layers,
            });
        }
        if by_layer[o.layer].is_some() {
            return Err(Error::InvalidArgument(format!(
                "two overrides for layer {}",
                o.layer
            )));
        }
        if let Some(s) = o.surrogate() {
            if s.weight.shape() != (d_model, d_model) || s.bias.len() != d_model {
                return Err(Error::Shape(format!(
                    "surrogate for layer {} is {:?}, model width {d_model}",
                    o.layer,
                    s.weight.shape()
                )));
            }
            if s.layer != o.layer {
                return Err(Error::InvalidArgument(format!(
                    "surrogate fitted for layer {} used at layer {}",
                    s.layer, o.layer
                )));
            }
        }
        if let OverrideKind::SoftGated { gate, .. } = &o.kind {
            if gate.d_model() != d_model {
                return Err(Error::Shape(format!(
                    "soft gate width {} for model width {d_model}",
                    gate.d_model()
                )));
            }
        }
        by_layer[o.layer] = Some(o);
    }
    Ok(by_layer)
}
