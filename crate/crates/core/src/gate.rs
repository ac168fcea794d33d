//! Per-position routing between an MLP and its surrogate: delta collection,
//! labels, the four gate architectures, and gated evaluation.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{flops_report, FlopsReport, MLP_SHARE};
use crate::capture::SplitRange;
use crate::error::{Error, Result};
use crate::eval::{delta_pct, evaluate};
use crate::linalg::stats::{mean, percentile_sorted, sorted};
use crate::linalg::{
    auc, fit_standardizer, logistic_fit, pca, sigmoid, softplus, LogisticModel, Matrix, Pca,
    Standardizer,
};
use crate::model::io::Dtype;
use crate::model::{
    read_container, write_container, Container, MlpOverride, Model, RoutingGate, Tensor,
};
use crate::scalar::Scalar;
use crate::surrogate::LinearSurrogate;

/// Logistic regularization strength.
pub const GATE_C: f64 = 1.0;
pub const ROUTE_THRESHOLD: f64 = 0.5;
pub const MIN_LABEL_DELTAS: usize = 4;

/// Loss of one predicted position with the full MLP and with the surrogate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub layer: usize,
    /// Index within the token stream.
    pub position: usize,
    pub token_id: u32,
    pub l_full: f64,
    pub l_lin: f64,
    /// `l_lin − l_full`.
    pub delta: f64,
}

/// Delta records with the matching gate inputs (MLP inputs), row-aligned.
#[derive(Clone, Debug)]
pub struct DeltaSet {
    pub layer: usize,
    pub records: Vec<DeltaRecord>,
    /// Position within its window, per record.
    pub window_positions: Vec<usize>,
    /// Entropy of the baseline next-token distribution, per record.
    pub entropies: Vec<f64>,
    pub x: Matrix<f64>,
}

impl DeltaSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.delta).collect()
    }

    pub fn select(&self, idx: &[usize]) -> DeltaSet {
        DeltaSet {
            layer: self.layer,
            records: idx.iter().map(|&i| self.records[i]).collect(),
            window_positions: idx.iter().map(|&i| self.window_positions[i]).collect(),
            entropies: idx.iter().map(|&i| self.entropies[i]).collect(),
            x: self.x.select_rows(idx),
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({ "kind": "delta_set" }));
        c.meta = Some(json!({ "layer": self.layer }));
        c.insert("x", Dtype::F64, Tensor::from_matrix(&self.x));
        let col =
            |f: &dyn Fn(&DeltaRecord) -> f64| Tensor::vector(self.records.iter().map(f).collect());
        c.insert("position", Dtype::F64, col(&|r| r.position as f64));
        c.insert("token_id", Dtype::F64, col(&|r| r.token_id as f64));
        c.insert("l_full", Dtype::F64, col(&|r| r.l_full));
        c.insert("l_lin", Dtype::F64, col(&|r| r.l_lin));
        c.insert("delta", Dtype::F64, col(&|r| r.delta));
        let wp = self.window_positions.iter().map(|&p| p as f64).collect();
        c.insert("window_position", Dtype::F64, Tensor::vector(wp));
        c.insert(
            "entropy",
            Dtype::F64,
            Tensor::vector(self.entropies.clone()),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let layer = c
            .meta
            .as_ref()
            .and_then(|m| m["layer"].as_u64())
            .ok_or_else(|| Error::Format("delta container has no meta.layer".into()))?
            as usize;
        let v = |n: &str| -> Result<Vec<f64>> { Ok(c.get(n)?.data.clone()) };
        let (pos, tok, lf, ll, d) = (
            v("position")?,
            v("token_id")?,
            v("l_full")?,
            v("l_lin")?,
            v("delta")?,
        );
        let records = (0..pos.len())
            .map(|i| DeltaRecord {
                layer,
                position: pos[i] as usize,
                token_id: tok[i] as u32,
                l_full: lf[i],
                l_lin: ll[i],
                delta: d[i],
            })
            .collect();
        Ok(DeltaSet {
            layer,
            records,
            window_positions: v("window_position")?
                .into_iter()
                .map(|p| p as usize)
                .collect(),
            entropies: v("entropy")?,
            x: c.get("x")?.to_matrix(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_container())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }
}

fn check_disjoint<T>(surrogate: &LinearSurrogate<T>, split: SplitRange) -> Result<()> {
    if let Some(fit) = surrogate.fit_split {
        if fit.overlaps(&split) {
            return Err(Error::InvalidArgument(format!(
                "split {}..{} overlaps the surrogate's fit split {}..{}",
                split.start, split.end, fit.start, fit.end
            )));
        }
    }
    Ok(())
}

/// Baseline and all-linear passes over `split`; one record per predicted
/// position, losses in `f64`.
pub fn collect_deltas<T: Scalar>(
    model: &Model<T>,
    surrogate: &Arc<LinearSurrogate<T>>,
    tokens: &[u32],
    split: SplitRange,
) -> Result<DeltaSet> {
    check_disjoint(surrogate, split)?;
    let layer = surrogate.layer;
    let base = evaluate(model, tokens, split, &[], &[layer])?;
    let lin = evaluate(
        model,
        tokens,
        split,
        &[MlpOverride::all_linear(surrogate.clone())],
        &[],
    )?;
    let records = (0..base.n_predicted())
        .map(|i| DeltaRecord {
            layer,
            position: base.stream_positions[i],
            token_id: base.token_ids[i],
            l_full: base.losses[i],
            l_lin: lin.losses[i],
            delta: lin.losses[i] - base.losses[i],
        })
        .collect();
    Ok(DeltaSet {
        layer,
        records,
        window_positions: base.positions.clone(),
        entropies: base.entropies.clone(),
        x: base.inputs[&layer].cast(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelRule {
    Median,
    P25,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    /// `true` = "linear OK".
    pub labels: Vec<bool>,
    pub threshold: f64,
    pub rule: LabelRule,
}

/// Class 1 iff `δ ≤ threshold`, where the threshold is the median when at
/// least 5% of deltas are negative, otherwise the 25th percentile.
pub fn label_deltas(deltas: &[f64]) -> Result<Labels> {
    if deltas.len() < MIN_LABEL_DELTAS {
        return Err(Error::InvalidArgument(format!(
            "label_deltas needs at least {MIN_LABEL_DELTAS} deltas, got {}",
            deltas.len()
        )));
    }
    let s = sorted(deltas)?;
    let neg = deltas.iter().filter(|&&d| d < 0.0).count() as f64 / deltas.len() as f64;
    let (rule, threshold) = if neg >= 0.05 {
        (LabelRule::Median, percentile_sorted(&s, 50.0))
    } else {
        (LabelRule::P25, percentile_sorted(&s, 25.0))
    };
    Ok(Labels {
        labels: deltas.iter().map(|&d| d <= threshold).collect(),
        threshold,
        rule,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateArch {
    Linear,
    B1,
    B3,
    B6,
}

impl GateArch {
    pub const ALL: [GateArch; 4] = [GateArch::Linear, GateArch::B1, GateArch::B3, GateArch::B6];

    pub fn name(self) -> &'static str {
        match self {
            GateArch::Linear => "linear",
            GateArch::B1 => "b1",
            GateArch::B3 => "b3",
            GateArch::B6 => "b6",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    fn pca_dims(self) -> Option<usize> {
        match self {
            GateArch::B3 => Some(6),
            GateArch::B6 => Some(12),
            _ => None,
        }
    }
}

/// `σ(v · ReLU(p · z) + c)` on standardized `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bottleneck {
    pub p: Vec<f64>,
    pub v: f64,
    pub c: f64,
    pub steps: usize,
    pub grad_norm: f64,
}

impl Bottleneck {
    fn logit(&self, z: &[f64]) -> f64 {
        let h: f64 = self.p.iter().zip(z).map(|(a, b)| a * b).sum();
        self.v * h.max(0.0) + self.c
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gate {
    pub arch: GateArch,
    pub layer: usize,
    /// Input standardization, fitted on the gate-training split.
    pub standardizer: Standardizer,
    pub pca: Option<Pca<f64>>,
    pub logistic: Option<LogisticModel>,
    pub bottleneck: Option<Bottleneck>,
    pub threshold: f64,
    pub train_auc: f64,
}

impl Gate {
    /// Probability that the position is safe to route linear.
    pub fn prob(&self, x: &[f64]) -> f64 {
        let z = self.standardizer.apply_row(x);
        match self.arch {
            GateArch::Linear => self
                .logistic
                .as_ref()
                .expect("linear gate")
                .predict_proba(&z),
            GateArch::B1 => sigmoid(self.bottleneck.as_ref().expect("b1 gate").logit(&z)),
            GateArch::B3 | GateArch::B6 => {
                let p = self.pca.as_ref().expect("pca gate").transform_row(&z);
                self.logistic.as_ref().expect("pca gate").predict_proba(&p)
            }
        }
    }

    pub fn scores(&self, x: &Matrix<f64>) -> Vec<f64> {
        x.iter_rows().map(|r| self.prob(r)).collect()
    }

    /// Learned parameters: `d + 1` (linear), `d + 2` (b1), and for the PCA
    /// gates the `k × d` projector plus `k + 1` logistic weights.
    pub fn n_params(&self) -> usize {
        let d = self.standardizer.mean.len();
        match self.arch {
            GateArch::Linear => d + 1,
            GateArch::B1 => d + 2,
            GateArch::B3 | GateArch::B6 => {
                let k = self.pca.as_ref().map_or(0, |p| p.n_components());
                k * d + k + 1
            }
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({ "kind": "gate" }));
        let mut meta = json!({
            "arch": self.arch,
            "layer": self.layer,
            "threshold": self.threshold,
            "train_auc": self.train_auc,
        });
        let v = |x: &[f64]| Tensor::vector(x.to_vec());
        c.insert("std.mean", Dtype::F64, v(&self.standardizer.mean));
        c.insert("std.std", Dtype::F64, v(&self.standardizer.std));
        if let Some(p) = &self.pca {
            c.insert("pca.mean", Dtype::F64, v(&p.mean));
            c.insert(
                "pca.components",
                Dtype::F64,
                Tensor::from_matrix(&p.components),
            );
            c.insert(
                "pca.explained_variance",
                Dtype::F64,
                v(&p.explained_variance),
            );
            c.insert(
                "pca.explained_variance_ratio",
                Dtype::F64,
                v(&p.explained_variance_ratio),
            );
        }
        if let Some(l) = &self.logistic {
            c.insert("logistic.w", Dtype::F64, v(&l.weights));
            c.insert("logistic.b", Dtype::F64, v(&[l.bias]));
            c.insert("logistic.std.mean", Dtype::F64, v(&l.standardizer.mean));
            c.insert("logistic.std.std", Dtype::F64, v(&l.standardizer.std));
            meta["logistic"] =
                json!({ "c": l.c, "iterations": l.iterations, "grad_norm": l.grad_norm });
        }
        if let Some(b) = &self.bottleneck {
            c.insert("b1.p", Dtype::F64, v(&b.p));
            c.insert("b1.v", Dtype::F64, v(&[b.v]));
            c.insert("b1.c", Dtype::F64, v(&[b.c]));
            meta["b1"] = json!({ "steps": b.steps, "grad_norm": b.grad_norm });
        }
        c.meta = Some(meta);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c
            .meta
            .as_ref()
            .ok_or_else(|| Error::Format("gate container has no meta".into()))?;
        let bad = |what: &str| Error::Format(format!("gate meta: missing {what}"));
        let arch: GateArch =
            serde_json::from_value(meta["arch"].clone()).map_err(|_| bad("arch"))?;
        let v = |n: &str| -> Result<Vec<f64>> { Ok(c.get(n)?.data.clone()) };
        let standardizer = Standardizer {
            mean: v("std.mean")?,
            std: v("std.std")?,
        };
        let pca = if c.tensors.contains_key("pca.components") {
            Some(Pca {
                mean: v("pca.mean")?,
                components: c.get("pca.components")?.to_matrix(),
                explained_variance: v("pca.explained_variance")?,
                explained_variance_ratio: v("pca.explained_variance_ratio")?,
            })
        } else {
            None
        };
        let logistic = if c.tensors.contains_key("logistic.w") {
            let lm = &meta["logistic"];
            Some(LogisticModel {
                weights: v("logistic.w")?,
                bias: v("logistic.b")?[0],
                c: lm["c"].as_f64().ok_or_else(|| bad("logistic.c"))?,
                standardizer: Standardizer {
                    mean: v("logistic.std.mean")?,
                    std: v("logistic.std.std")?,
                },
                iterations: lm["iterations"].as_u64().unwrap_or(0) as usize,
                grad_norm: lm["grad_norm"].as_f64().unwrap_or(f64::NAN),
            })
        } else {
            None
        };
        let bottleneck = if c.tensors.contains_key("b1.p") {
            Some(Bottleneck {
                p: v("b1.p")?,
                v: v("b1.v")?[0],
                c: v("b1.c")?[0],
                steps: meta["b1"]["steps"].as_u64().unwrap_or(0) as usize,
                grad_norm: meta["b1"]["grad_norm"].as_f64().unwrap_or(f64::NAN),
            })
        } else {
            None
        };
        let ok = match arch {
            GateArch::Linear => logistic.is_some(),
            GateArch::B1 => bottleneck.is_some(),
            GateArch::B3 | GateArch::B6 => logistic.is_some() && pca.is_some(),
        };
        if !ok {
            return Err(Error::Format(format!(
                "gate container lacks tensors for {arch:?}"
            )));
        }
        Ok(Gate {
            arch,
            layer: meta["layer"].as_u64().ok_or_else(|| bad("layer"))? as usize,
            standardizer,
            pca,
            logistic,
            bottleneck,
            threshold: meta["threshold"].as_f64().unwrap_or(ROUTE_THRESHOLD),
            train_auc: meta["train_auc"].as_f64().unwrap_or(f64::NAN),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_container())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }
}

impl RoutingGate for Gate {
    fn score(&self, x: &[f64]) -> f64 {
        self.prob(x)
    }

    fn n_params(&self) -> usize {
        Gate::n_params(self)
    }
}

const B1_MAX_STEPS: usize = 3000;
const B1_LR: f64 = 0.5;
const B1_TOL: f64 = 1e-6;

/// Full-batch gradient descent on the mean log-loss plus `‖θ‖²/(2·C·n)`,
/// from a seeded start.
fn train_bottleneck(z: &Matrix<f64>, labels: &[bool], seed: u64) -> Bottleneck {
    let (n, d) = z.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let mut b = Bottleneck {
        p: (0..d).map(|_| init.sample(&mut rng)).collect(),
        v: 1.0,
        c: 0.0,
        steps: 0,
        grad_norm: f64::INFINITY,
    };
    let reg = 1.0 / (GATE_C * n as f64);
    let inv_n = 1.0 / n as f64;
    for step in 0..B1_MAX_STEPS {
        let mut gp = vec![0.0; d];
        let mut gv = 0.0;
        let mut gc = 0.0;
        for (r, &l) in z.iter_rows().zip(labels) {
            let h: f64 = b.p.iter().zip(r).map(|(a, x)| a * x).sum();
            let relu = h.max(0.0);
            let resid = sigmoid(b.v * relu + b.c) - if l { 1.0 } else { 0.0 };
            gv += resid * relu;
            gc += resid;
            if h > 0.0 {
                let k = resid * b.v;
                for (g, &x) in gp.iter_mut().zip(r) {
                    *g += k * x;
                }
            }
        }
        for (g, &p) in gp.iter_mut().zip(&b.p) {
            *g = *g * inv_n + reg * p;
        }
        gv = gv * inv_n + reg * b.v;
        gc *= inv_n;
        let norm = (gp.iter().map(|g| g * g).sum::<f64>() + gv * gv + gc * gc).sqrt();
        b.grad_norm = norm;
        b.steps = step;
        if norm < B1_TOL {
            break;
        }
        for (p, g) in b.p.iter_mut().zip(&gp) {
            *p -= B1_LR * g;
        }
        b.v -= B1_LR * gv;
        b.c -= B1_LR * gc;
    }
    b
}

/// Mean log-loss of a bottleneck gate, for tests and diagnostics.
pub fn bottleneck_loss(b: &Bottleneck, z: &Matrix<f64>, labels: &[bool]) -> f64 {
    z.iter_rows()
        .zip(labels)
        .map(|(r, &l)| {
            let m = b.logit(r);
            softplus(if l { -m } else { m })
        })
        .sum::<f64>()
        / z.rows() as f64
}

pub fn train_gate(
    arch: GateArch,
    layer: usize,
    x: &Matrix<f64>,
    labels: &[bool],
    seed: u64,
) -> Result<Gate> {
    if x.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} gate inputs but {} labels",
            x.rows(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateLabels(format!(
            "{pos} positives out of {}",
            labels.len()
        )));
    }
    let standardizer = fit_standardizer(x);
    let z = standardizer.apply(x);
    let mut gate = Gate {
        arch,
        layer,
        standardizer,
        pca: None,
        logistic: None,
        bottleneck: None,
        threshold: ROUTE_THRESHOLD,
        train_auc: f64::NAN,
    };
    match arch {
        GateArch::Linear => gate.logistic = Some(logistic_fit(&z, labels, GATE_C)?),
        GateArch::B1 => gate.bottleneck = Some(train_bottleneck(&z, labels, seed)),
        GateArch::B3 | GateArch::B6 => {
            let k = arch
                .pca_dims()
                .expect("pca arch")
                .min(z.cols())
                .min(z.rows() - 1);
            let p = pca(&z, k)?;
            let proj = p.transform(&z);
            gate.logistic = Some(logistic_fit(&proj, labels, GATE_C)?);
            gate.pca = Some(p);
        }
    }
    gate.train_auc = auc(&gate.scores(x), labels)?;
    Ok(gate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub layer: usize,
    pub arch: Option<GateArch>,
    pub ppl_base: f64,
    pub ppl_gated: f64,
    pub delta_pct: f64,
    pub pct_linear: f64,
    pub gate_params: usize,
    /// AUC of gate scores against labels rebuilt on the evaluation split;
    /// `None` if those labels are single-class.
    pub auc: Option<f64>,
    pub n_eval_tokens: usize,
}

/// Hard routing at `threshold`: the surrogate handles a position iff the
/// gate's score exceeds it.
pub fn eval_gated_at<T: Scalar>(
    model: &Model<T>,
    surrogate: &Arc<LinearSurrogate<T>>,
    gate: Arc<dyn RoutingGate>,
    tokens: &[u32],
    split: SplitRange,
    threshold: f64,
) -> Result<RoutingReport> {
    check_disjoint(surrogate, split)?;
    let layer = surrogate.layer;
    let base = evaluate(model, tokens, split, &[], &[layer])?;
    let ov = MlpOverride::hard_gated_at(surrogate.clone(), gate.clone(), threshold);
    let gated = evaluate(model, tokens, split, &[ov], &[])?;
    let lin = evaluate(
        model,
        tokens,
        split,
        &[MlpOverride::all_linear(surrogate.clone())],
        &[],
    )?;
    let deltas: Vec<f64> = lin
        .losses
        .iter()
        .zip(&base.losses)
        .map(|(l, f)| l - f)
        .collect();
    let x: Matrix<f64> = base.inputs[&layer].cast();
    let scores: Vec<f64> = x.iter_rows().map(|r| gate.score(r)).collect();
    let auc = label_deltas(&deltas)
        .ok()
        .and_then(|l| auc(&scores, &l.labels).ok());
    Ok(RoutingReport {
        layer,
        arch: None,
        ppl_base: base.ppl(),
        ppl_gated: gated.ppl(),
        delta_pct: delta_pct(base.ppl(), gated.ppl()),
        pct_linear: gated.pct_linear(layer).unwrap_or(0.0),
        gate_params: gate.n_params(),
        auc,
        n_eval_tokens: base.n_predicted(),
    })
}

pub fn eval_gated<T: Scalar>(
    model: &Model<T>,
    surrogate: &Arc<LinearSurrogate<T>>,
    gate: &Arc<Gate>,
    tokens: &[u32],
    split: SplitRange,
) -> Result<RoutingReport> {
    let mut r = eval_gated_at(
        model,
        surrogate,
        gate.clone() as Arc<dyn RoutingGate>,
        tokens,
        split,
        gate.threshold,
    )?;
    r.arch = Some(gate.arch);
    Ok(r)
}

/// Index of the best report: lowest `delta_pct`, then highest `pct_linear`.
pub fn select_best(reports: &[RoutingReport]) -> Option<usize> {
    (0..reports.len()).min_by(|&a, &b| {
        let (ra, rb) = (&reports[a], &reports[b]);
        ra.delta_pct
            .total_cmp(&rb.delta_pct)
            .then(rb.pct_linear.total_cmp(&ra.pct_linear))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompoundReport {
    pub layers: Vec<usize>,
    pub pct_linear: Vec<f64>,
    pub mean_pct_linear: f64,
    pub total_gate_params: usize,
    pub ppl_base: f64,
    pub ppl_gated: f64,
    pub delta_pct: f64,
    pub flops: FlopsReport,
    pub n_eval_tokens: usize,
}

/// Every participating layer hard-gated at once.
pub fn compound_gating<T: Scalar>(
    model: &Model<T>,
    entries: &[(Arc<LinearSurrogate<T>>, Arc<dyn RoutingGate>)],
    tokens: &[u32],
    split: SplitRange,
) -> Result<CompoundReport> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument(
            "compound gating needs at least one layer".into(),
        ));
    }
    for (s, _) in entries {
        check_disjoint(s, split)?;
    }
    let overrides: Vec<MlpOverride<T>> = entries
        .iter()
        .map(|(s, g)| MlpOverride::hard_gated(s.clone(), g.clone()))
        .collect();
    let base = evaluate(model, tokens, split, &[], &[])?;
    let gated = evaluate(model, tokens, split, &overrides, &[])?;
    let layers: Vec<usize> = entries.iter().map(|(s, _)| s.layer).collect();
    let pct_linear: Vec<f64> = layers
        .iter()
        .map(|&l| gated.pct_linear(l).unwrap_or(0.0))
        .collect();
    Ok(CompoundReport {
        mean_pct_linear: mean(&pct_linear),
        total_gate_params: entries.iter().map(|(_, g)| g.n_params()).sum(),
        ppl_base: base.ppl(),
        ppl_gated: gated.ppl(),
        delta_pct: delta_pct(base.ppl(), gated.ppl()),
        flops: {
            let mut per_layer = vec![0.0; model.config.n_layers];
            for (&l, &p) in layers.iter().zip(&pct_linear) {
                per_layer[l] = p;
            }
            flops_report(&per_layer, MLP_SHARE)?
        },
        n_eval_tokens: base.n_predicted(),
        layers,
        pct_linear,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn label_hand_cases() {
        let l = label_deltas(&[-0.1, 0.0, 0.1, 0.2]).unwrap();
        assert_eq!(l.rule, LabelRule::Median);
        assert!((l.threshold - 0.05).abs() < 1e-15);
        assert_eq!(l.labels, vec![true, true, false, false]);

        let l = label_deltas(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(l.rule, LabelRule::P25);
        assert_eq!(l.threshold, 1.75);
        assert_eq!(l.labels, vec![true, false, false, false]);

        let l = label_deltas(&[-0.3; 6]).unwrap();
        assert_eq!(l.rule, LabelRule::Median);
        assert!(l.labels.iter().all(|&b| b));

        assert!(label_deltas(&[1.0, 2.0, 3.0]).is_err());
    }

    /// Planted labels follow `x0 − x1/2 > 0.1`, with `x0` pushed 0.3 away
    /// from the boundary so the classes are separated by a margin.
    fn synthetic(n: usize, d: usize, seed: u64, planted: bool) -> (Matrix<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let labels = (0..n)
            .map(|i| {
                if planted {
                    let side = x[(i, 0)] - 0.5 * x[(i, 1)] > 0.1;
                    x.row_mut(i)[0] += if side { 0.3 } else { -0.3 };
                    side
                } else {
                    rng.random_bool(0.5)
                }
            })
            .collect();
        (x, labels)
    }

    #[test]
    fn parameter_counts() {
        let d = 16;
        let (x, y) = synthetic(200, d, 1, true);
        let counts: Vec<usize> = GateArch::ALL
            .iter()
            .map(|&a| train_gate(a, 0, &x, &y, 3).unwrap().n_params())
            .collect();
        assert_eq!(counts, vec![d + 1, d + 2, 6 * d + 7, 12 * d + 13]);
    }

    #[test]
    fn separable_gets_perfect_auc() {
        let (x, y) = synthetic(400, 6, 2, true);
        let g = train_gate(GateArch::Linear, 0, &x, &y, 0).unwrap();
        assert_eq!(g.train_auc, 1.0);
        let (xt, yt) = synthetic(400, 6, 3, true);
        assert!(auc(&g.scores(&xt), &yt).unwrap() > 0.99);
    }

    #[test]
    fn null_labels_give_chance_auc() {
        let (x, y) = synthetic(4000, 8, 4, false);
        let (xt, yt) = synthetic(4000, 8, 5, false);
        for arch in GateArch::ALL {
            let g = train_gate(arch, 0, &x, &y, 6).unwrap();
            let a = auc(&g.scores(&xt), &yt).unwrap();
            assert!((0.45..=0.55).contains(&a), "{arch:?}: {a}");
        }
    }

    #[test]
    fn bottleneck_descends() {
        let (x, y) = synthetic(300, 5, 7, true);
        let z = fit_standardizer(&x).apply(&x);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init = Normal::new(0.0, 1.0 / (5f64).sqrt()).unwrap();
        let start = Bottleneck {
            p: (0..5).map(|_| init.sample(&mut rng)).collect(),
            v: 1.0,
            c: 0.0,
            steps: 0,
            grad_norm: 0.0,
        };
        let trained = train_bottleneck(&z, &y, 9);
        assert_eq!(trained.p.len(), 5);
        assert!(bottleneck_loss(&trained, &z, &y) < bottleneck_loss(&start, &z, &y));
        assert_eq!(trained, train_bottleneck(&z, &y, 9));
    }

    #[test]
    fn gate_container_round_trip() {
        let (x, y) = synthetic(300, 8, 10, true);
        for arch in GateArch::ALL {
            let g = train_gate(arch, 2, &x, &y, 1).unwrap();
            let back = Gate::from_container(&g.to_container()).unwrap();
            assert_eq!(back.arch, arch);
            assert_eq!(back.layer, 2);
            assert_eq!(g.scores(&x), back.scores(&x));
        }
    }

    #[test]
    fn best_selection_breaks_ties_on_coverage() {
        let r = |d: f64, p: f64| RoutingReport {
            layer: 0,
            arch: None,
            ppl_base: 1.0,
            ppl_gated: 1.0,
            delta_pct: d,
            pct_linear: p,
            gate_params: 0,
            auc: None,
            n_eval_tokens: 0,
        };
        assert_eq!(
            select_best(&[r(1.0, 0.9), r(0.5, 0.1), r(0.5, 0.3)]),
            Some(2)
        );
        assert_eq!(select_best(&[]), None);
    }
}
