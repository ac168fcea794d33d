//! Forward pass with optional activation capture, and the matching
//! hand-derived backward pass.
//!
//! Every forward pass records the intermediates needed by [`Model::backward`];
//! evaluation simply drops them. Keeping a single code path guarantees that
//! the model being trained is the model being evaluated.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::mlp::{mlp_hidden, mlp_project};
use crate::model::overrides::{index_overrides, SoftGate, SoftGateTrace};
use crate::model::{
    mlp_param_names, Activation, MlpOverride, Model, OverrideKind, PosEncoding, Tensor, Wiring,
    LN_EPS, ROTARY_BASE,
};
use crate::scalar::Scalar;

/// Which layers to record MLP inputs and outputs for.
#[derive(Clone, Debug, Default)]
pub struct CaptureRequest {
    pub layers: Vec<usize>,
}

impl CaptureRequest {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn layers(layers: &[usize]) -> Self {
        CaptureRequest {
            layers: layers.to_vec(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Exact MLP input (post-LN) and output at one layer, one row per position.
#[derive(Clone, Debug)]
pub struct LayerCapture<T> {
    pub x: Matrix<T>,
    pub y: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `seq × vocab`, always `f64`.
    pub logits: Matrix<f64>,
    /// Token embedding (plus learned position embedding) per position; filled
    /// only when a capture was requested.
    pub embeddings: Option<Matrix<T>>,
    pub captures: BTreeMap<usize, LayerCapture<T>>,
    /// Per hard-gated layer: whether each position took the linear path.
    pub routing: BTreeMap<usize, Vec<bool>>,
    /// Per soft-gated layer: the gate value at each position.
    pub gate_values: BTreeMap<usize, Vec<f64>>,
}

#[derive(Clone, Debug)]
struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
enum MlpCache<T> {
    Full {
        pre: Matrix<T>,
        act: Matrix<T>,
    },
    Linear,
    Hard {
        route_linear: Vec<bool>,
        pre: Matrix<T>,
        act: Matrix<T>,
    },
    Soft {
        pre: Matrix<T>,
        act: Matrix<T>,
        mlp_out: Matrix<T>,
        lin_out: Matrix<T>,
        traces: Vec<SoftGateTrace<T>>,
    },
    Replaced,
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    ln1: LnCache,
    attn_in: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// One `seq × seq` lower-triangular probability matrix per head.
    probs: Vec<Matrix<T>>,
    attn_concat: Matrix<T>,
    ln2: LnCache,
    mlp_in: Matrix<T>,
    mlp: MlpCache<T>,
}

/// Intermediates of one forward pass, consumed by [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    tokens: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    ln_f: LnCache,
    final_hidden: Matrix<f64>,
}

fn ln_forward<T: Scalar>(x: &Matrix<T>, g: &Tensor<T>, b: &Tensor<T>) -> (Matrix<T>, LnCache) {
    let (n, d) = x.shape();
    let mut out = Matrix::zeros(n, d);
    let mut xhat = Vec::with_capacity(n * d);
    let mut inv_std = Vec::with_capacity(n);
    for t in 0..n {
        let row = x.row(t);
        let mean = row.iter().map(|v| v.wide()).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|v| {
                let c = v.wide() - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let orow = out.row_mut(t);
        for j in 0..d {
            let h = (row[j].wide() - mean) * inv;
            xhat.push(h);
            orow[j] = T::of(h) * g.data[j] + b.data[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// Returns `dx`; accumulates gain and bias gradients when given.
fn ln_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &LnCache,
    g: &Tensor<T>,
    mut grads: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
) -> Matrix<T> {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dxhat = vec![0.0f64; d];
    for t in 0..n {
        let xh = &cache.xhat[t * d..(t + 1) * d];
        let dyr = dy.row(t);
        if let Some((gg, gb)) = grads.as_mut() {
            for j in 0..d {
                gg.data[j] += dyr[j] * T::of(xh[j]);
                gb.data[j] += dyr[j];
            }
        }
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            dxhat[j] = dyr[j].wide() * g.data[j].wide();
            m1 += dxhat[j];
            m2 += dxhat[j] * xh[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let inv = cache.inv_std[t];
        let dxr = dx.row_mut(t);
        for j in 0..d {
            dxr[j] = T::of(inv * (dxhat[j] - m1 - xh[j] * m2));
        }
    }
    dx
}

/// `x Wᵀ + b` for `W` stored `[out, in]`.
fn linear_rows<T: Scalar>(x: &Matrix<T>, w: &Tensor<T>, b: &Tensor<T>) -> Matrix<T> {
    let (out_dim, _) = w.dims2();
    let n = x.rows();
    let mut y = Matrix::zeros(n, out_dim);
    for t in 0..n {
        let xr = x.row(t);
        let yr = y.row_mut(t);
        for (o, yv) in yr.iter_mut().enumerate() {
            let wr = w.row(o);
            let mut s = b.data[o];
            for (&a, &c) in wr.iter().zip(xr) {
                s += a * c;
            }
            *yv = s;
        }
    }
    y
}

/// Returns `dx = dy W`; accumulates `dW += dyᵀ x` and `db += Σ dy`.
fn linear_rows_backward<T: Scalar>(
    dy: &Matrix<T>,
    x: &Matrix<T>,
    w: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) -> Matrix<T> {
    let (out_dim, in_dim) = w.dims2();
    let n = dy.rows();
    let mut dx = Matrix::zeros(n, in_dim);
    for t in 0..n {
        let dyr = dy.row(t);
        let xr = x.row(t);
        let dxr = dx.row_mut(t);
        for o in 0..out_dim {
            let g = dyr[o];
            if g == T::zero() {
                continue;
            }
            db.data[o] += g;
            let wr = w.row(o);
            let dwr = dw.row_mut(o);
            for i in 0..in_dim {
                dwr[i] += g * xr[i];
                dxr[i] += g * wr[i];
            }
        }
    }
    dx
}

/// Rotates pairs `(i, i + half)` of every head by `pos · base^(−2i/head_dim)`.
/// `inverse` applies the transpose rotation.
fn rotary<T: Scalar>(m: &mut Matrix<T>, n_heads: usize, inverse: bool) {
    let (n, d) = m.shape();
    let hd = d / n_heads;
    let half = hd / 2;
    for t in 0..n {
        let row = m.row_mut(t);
        for h in 0..n_heads {
            let base = h * hd;
            for i in 0..half {
                let freq = ROTARY_BASE.powf(-2.0 * i as f64 / hd as f64);
                let angle = t as f64 * freq;
                let (s, c) = angle.sin_cos();
                let s = if inverse { -s } else { s };
                let (s, c) = (T::of(s), T::of(c));
                let a = row[base + i];
                let b = row[base + i + half];
                row[base + i] = a * c - b * s;
                row[base + i + half] = a * s + b * c;
            }
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

struct LayerRefs<'a, T> {
    ln1_w: &'a Tensor<T>,
    ln1_b: &'a Tensor<T>,
    ln2_w: &'a Tensor<T>,
    ln2_b: &'a Tensor<T>,
    w: [&'a Tensor<T>; 4],
    b: [&'a Tensor<T>; 4],
}

impl<T: Scalar> Model<T> {
    fn layer_refs(&self, l: usize) -> LayerRefs<'_, T> {
        let p = |s: &str| self.p(&format!("layers.{l}.{s}"));
        LayerRefs {
            ln1_w: p("ln1.weight"),
            ln1_b: p("ln1.bias"),
            ln2_w: p("ln2.weight"),
            ln2_b: p("ln2.bias"),
            w: [p("attn.w_q"), p("attn.w_k"), p("attn.w_v"), p("attn.w_o")],
            b: [p("attn.b_q"), p("attn.b_k"), p("attn.b_v"), p("attn.b_o")],
        }
    }

    fn embed(&self, tokens: &[u32]) -> Matrix<T> {
        let d = self.config.d_model;
        let tok = self.p("tok_emb");
        let pos = (self.config.pos_encoding == PosEncoding::Learned).then(|| self.p("pos_emb"));
        let mut h = Matrix::zeros(tokens.len(), d);
        for (t, &id) in tokens.iter().enumerate() {
            let row = h.row_mut(t);
            row.copy_from_slice(tok.row(id as usize));
            if let Some(pos) = pos {
                for (r, &p) in row.iter_mut().zip(pos.row(t)) {
                    *r += p;
                }
            }
        }
        h
    }

    pub fn forward(
        &self,
        tokens: &[u32],
        overrides: &[MlpOverride<T>],
        capture: &CaptureRequest,
    ) -> Result<ForwardOutput<T>> {
        self.forward_with_cache(tokens, overrides, capture)
            .map(|(out, _)| out)
    }

    pub fn forward_with_cache(
        &self,
        tokens: &[u32],
        overrides: &[MlpOverride<T>],
        capture: &CaptureRequest,
    ) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > cfg.max_seq {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                cfg.max_seq
            )));
        }
        self.check_tokens(tokens)?;
        let by_layer = index_overrides(overrides, cfg.n_layers, cfg.d_model)?;
        for &l in &capture.layers {
            if l >= cfg.n_layers {
                return Err(Error::LayerOutOfRange {
                    layer: l,
                    n_layers: cfg.n_layers,
                });
            }
        }

        let mut h = self.embed(tokens);
        let embeddings = (!capture.is_empty()).then(|| h.clone());
        let mut captures = BTreeMap::new();
        let mut routing = BTreeMap::new();
        let mut gate_values = BTreeMap::new();
        let mut layers = Vec::with_capacity(cfg.n_layers);

        for (l, ov) in by_layer.iter().enumerate() {
            let r = self.layer_refs(l);
            let (attn_in, ln1) = ln_forward(&h, r.ln1_w, r.ln1_b);
            let (attn_out, q, k, v, probs, attn_concat) = self.attention(&attn_in, &r);
            let resid = match cfg.wiring {
                Wiring::Sequential => {
                    let mut mid = h.clone();
                    add_into(&mut mid, &attn_out);
                    mid
                }
                Wiring::Parallel => h.clone(),
            };
            let (mlp_in, ln2) = ln_forward(&resid, r.ln2_w, r.ln2_b);
            let (mlp_out, mlp_cache) = self.mlp_block(l, &mlp_in, *ov)?;
            match &mlp_cache {
                MlpCache::Hard { route_linear, .. } => {
                    routing.insert(l, route_linear.clone());
                }
                MlpCache::Soft { traces, .. } => {
                    gate_values.insert(l, traces.iter().map(|t| t.g.wide()).collect());
                }
                _ => {}
            }
            if capture.layers.contains(&l) {
                captures.insert(
                    l,
                    LayerCapture {
                        x: mlp_in.clone(),
                        y: mlp_out.clone(),
                    },
                );
            }
            let mut next = resid;
            if cfg.wiring == Wiring::Parallel {
                add_into(&mut next, &attn_out);
            }
            add_into(&mut next, &mlp_out);
            h = next;
            layers.push(LayerCache {
                ln1,
                attn_in,
                q,
                k,
                v,
                probs,
                attn_concat,
                ln2,
                mlp_in,
                mlp: mlp_cache,
            });
        }

        // Final norm and unembedding in f64.
        let hw = h.cast::<f64>();
        let (final_hidden, ln_f) = ln_forward(
            &hw,
            &self.p("ln_f.weight").cast(),
            &self.p("ln_f.bias").cast(),
        );
        let head = self.p("lm_head");
        let vocab = cfg.vocab_size;
        let mut logits = Matrix::zeros(tokens.len(), vocab);
        for t in 0..tokens.len() {
            let f = final_hidden.row(t);
            let lr = logits.row_mut(t);
            for (o, z) in lr.iter_mut().enumerate() {
                *z = head.row(o).iter().zip(f).map(|(&w, &x)| w.wide() * x).sum();
            }
        }
        if !logits.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        let out = ForwardOutput {
            logits,
            embeddings,
            captures,
            routing,
            gate_values,
        };
        let cache = ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            ln_f,
            final_hidden,
        };
        Ok((out, cache))
    }

    #[allow(clippy::type_complexity)]
    fn attention(
        &self,
        a: &Matrix<T>,
        r: &LayerRefs<'_, T>,
    ) -> (
        Matrix<T>,
        Matrix<T>,
        Matrix<T>,
        Matrix<T>,
        Vec<Matrix<T>>,
        Matrix<T>,
    ) {
        let cfg = &self.config;
        let n = a.rows();
        let hd = cfg.head_dim();
        let mut q = linear_rows(a, r.w[0], r.b[0]);
        let mut k = linear_rows(a, r.w[1], r.b[1]);
        let v = linear_rows(a, r.w[2], r.b[2]);
        if cfg.pos_encoding == PosEncoding::Rotary {
            rotary(&mut q, cfg.n_heads, false);
            rotary(&mut k, cfg.n_heads, false);
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let mut concat = Matrix::zeros(n, cfg.d_model);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        let mut scores = vec![0.0f64; n];
        for h in 0..cfg.n_heads {
            let off = h * hd;
            let mut p = Matrix::zeros(n, n);
            for t in 0..n {
                let qt = &q.row(t)[off..off + hd];
                let mut max = f64::NEG_INFINITY;
                for (u, s) in scores.iter_mut().enumerate().take(t + 1) {
                    let ku = &k.row(u)[off..off + hd];
                    let dot: f64 = qt.iter().zip(ku).map(|(&x, &y)| (x * y).wide()).sum();
                    *s = dot * scale;
                    max = max.max(*s);
                }
                // Positions u > t are masked to −∞, i.e. probability zero.
                let mut z = 0.0;
                for s in scores.iter_mut().take(t + 1) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let prow = p.row_mut(t);
                for u in 0..=t {
                    prow[u] = T::of(scores[u] / z);
                }
                let orow = &mut concat.row_mut(t)[off..off + hd];
                for u in 0..=t {
                    let w = prow[u];
                    let vu = &v.row(u)[off..off + hd];
                    for (o, &vv) in orow.iter_mut().zip(vu) {
                        *o += w * vv;
                    }
                }
            }
            probs.push(p);
        }
        let out = linear_rows(&concat, r.w[3], r.b[3]);
        (out, q, k, v, probs, concat)
    }

    fn mlp_block(
        &self,
        layer: usize,
        x: &Matrix<T>,
        ov: Option<&MlpOverride<T>>,
    ) -> Result<(Matrix<T>, MlpCache<T>)> {
        let n = x.rows();
        let d = self.config.d_model;
        let full = |x: &Matrix<T>| -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
            let p = self.mlp_params(layer)?;
            let h = p.d_mlp();
            let mut pre = Matrix::zeros(n, h);
            let mut act = Matrix::zeros(n, h);
            let mut out = Matrix::zeros(n, d);
            for t in 0..n {
                mlp_hidden(&p, x.row(t), pre.row_mut(t));
                for (a, &z) in act.row_mut(t).iter_mut().zip(pre.row(t)) {
                    *a = p.activation.apply(z);
                }
                mlp_project(&p, act.row(t), out.row_mut(t));
            }
            Ok((out, pre, act))
        };
        let kind = ov.map(|o| &o.kind).unwrap_or(&OverrideKind::None);
        match kind {
            OverrideKind::None => {
                let (out, pre, act) = full(x)?;
                Ok((out, MlpCache::Full { pre, act }))
            }
            OverrideKind::AllLinear(s) => Ok((s.apply_rows(x), MlpCache::Linear)),
            OverrideKind::HardGated {
                surrogate,
                gate,
                threshold,
            } => {
                let (mut out, pre, act) = full(x)?;
                let mut route_linear = Vec::with_capacity(n);
                for t in 0..n {
                    let xw: Vec<f64> = x.row(t).iter().map(|v| v.wide()).collect();
                    let lin = gate.score(&xw) > *threshold;
                    if lin {
                        surrogate.apply_into(x.row(t), out.row_mut(t));
                    }
                    route_linear.push(lin);
                }
                Ok((
                    out,
                    MlpCache::Hard {
                        route_linear,
                        pre,
                        act,
                    },
                ))
            }
            OverrideKind::SoftGated { surrogate, gate } => {
                let (mlp_out, pre, act) = full(x)?;
                let lin_out = surrogate.apply_rows(x);
                let mut out = Matrix::zeros(n, d);
                let mut traces = Vec::with_capacity(n);
                for t in 0..n {
                    let tr = gate.trace(x.row(t));
                    let g = tr.g;
                    let one_minus = T::one() - g;
                    for ((o, &m), &li) in out
                        .row_mut(t)
                        .iter_mut()
                        .zip(mlp_out.row(t))
                        .zip(lin_out.row(t))
                    {
                        // A pinned gate must select one path exactly.
                        *o = if g == T::one() {
                            m
                        } else if g == T::zero() {
                            li
                        } else {
                            g * m + one_minus * li
                        };
                    }
                    traces.push(tr);
                }
                Ok((
                    out,
                    MlpCache::Soft {
                        pre,
                        act,
                        mlp_out,
                        lin_out,
                        traces,
                    },
                ))
            }
            OverrideKind::Replace(f) => {
                let mut out = Matrix::zeros(n, d);
                for t in 0..n {
                    let y = f.apply(x.row(t));
                    if y.len() != d {
                        return Err(Error::Shape(format!(
                            "replacement at layer {layer} returned {} values",
                            y.len()
                        )));
                    }
                    out.row_mut(t).copy_from_slice(&y);
                }
                Ok((out, MlpCache::Replaced))
            }
        }
    }

    /// Gradients of a scalar loss given `dL/dlogits`.
    ///
    /// Returns one entry per model parameter that influenced the output,
    /// plus `gate.{layer}.{w,c,v,b}` for soft-gated overrides. MLP weights of
    /// layers whose MLP is bypassed entirely are omitted. Surrogates are
    /// constants and never receive gradients.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        overrides: &[MlpOverride<T>],
        dlogits: &Matrix<f64>,
    ) -> Result<BTreeMap<String, Tensor<T>>> {
        let cfg = &self.config;
        let n = cache.tokens.len();
        if dlogits.shape() != (n, cfg.vocab_size) {
            return Err(Error::Shape(format!(
                "dlogits {:?} for {n} positions",
                dlogits.shape()
            )));
        }
        let by_layer = index_overrides(overrides, cfg.n_layers, cfg.d_model)?;
        let mut grads: BTreeMap<String, Tensor<T>> = cfg
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(&shape)))
            .collect();
        let mut gate_grads: BTreeMap<usize, SoftGate<T>> = BTreeMap::new();

        // Unembedding and final norm, in f64.
        let head = self.p("lm_head");
        let d = cfg.d_model;
        let mut dfinal = Matrix::<f64>::zeros(n, d);
        {
            let gh = grads.get_mut("lm_head").expect("lm_head grad");
            for t in 0..n {
                let f = cache.final_hidden.row(t);
                let dl = dlogits.row(t);
                let df = dfinal.row_mut(t);
                for (o, &g) in dl.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let hr = head.row(o);
                    let ghr = gh.row_mut(o);
                    for j in 0..d {
                        ghr[j] += T::of(g * f[j]);
                        df[j] += g * hr[j].wide();
                    }
                }
            }
        }
        let mut gw = Tensor::<f64>::zeros(&[d]);
        let mut gb = Tensor::<f64>::zeros(&[d]);
        let dh_wide = ln_backward(
            &dfinal,
            &cache.ln_f,
            &self.p("ln_f.weight").cast(),
            Some((&mut gw, &mut gb)),
        );
        grads.insert("ln_f.weight".into(), gw.cast());
        grads.insert("ln_f.bias".into(), gb.cast());
        let mut dh: Matrix<T> = dh_wide.cast();

        for l in (0..cfg.n_layers).rev() {
            let lc = &cache.layers[l];
            let r = self.layer_refs(l);
            let name = |s: &str| format!("layers.{l}.{s}");
            // MLP branch.
            let dmlp_in =
                self.mlp_backward(l, lc, by_layer[l], &dh, &mut grads, &mut gate_grads)?;
            let (g2w, g2b) = take_pair(&mut grads, &name("ln2.weight"), &name("ln2.bias"));
            let mut g2w = g2w;
            let mut g2b = g2b;
            let dresid = ln_backward(&dmlp_in, &lc.ln2, r.ln2_w, Some((&mut g2w, &mut g2b)));
            grads.insert(name("ln2.weight"), g2w);
            grads.insert(name("ln2.bias"), g2b);

            // Gradient reaching the attention output.
            let (dattn_out, mut dh_in) = match cfg.wiring {
                Wiring::Sequential => {
                    let mut dmid = dh.clone();
                    add_into(&mut dmid, &dresid);
                    (dmid.clone(), dmid)
                }
                Wiring::Parallel => {
                    let mut dprev = dh.clone();
                    add_into(&mut dprev, &dresid);
                    (dh.clone(), dprev)
                }
            };
            let dattn_in = self.attention_backward(l, lc, &r, &dattn_out, &mut grads);
            let (mut g1w, mut g1b) = take_pair(&mut grads, &name("ln1.weight"), &name("ln1.bias"));
            let dln1 = ln_backward(&dattn_in, &lc.ln1, r.ln1_w, Some((&mut g1w, &mut g1b)));
            grads.insert(name("ln1.weight"), g1w);
            grads.insert(name("ln1.bias"), g1b);
            add_into(&mut dh_in, &dln1);
            dh = dh_in;
        }

        // Embeddings.
        {
            let gt = grads.get_mut("tok_emb").expect("tok_emb grad");
            for (t, &id) in cache.tokens.iter().enumerate() {
                for (g, &v) in gt.row_mut(id as usize).iter_mut().zip(dh.row(t)) {
                    *g += v;
                }
            }
        }
        if cfg.pos_encoding == PosEncoding::Learned {
            let gp = grads.get_mut("pos_emb").expect("pos_emb grad");
            for t in 0..n {
                for (g, &v) in gp.row_mut(t).iter_mut().zip(dh.row(t)) {
                    *g += v;
                }
            }
        }

        for (l, ov) in by_layer.iter().enumerate() {
            if ov.is_some_and(|o| o.bypasses_mlp()) {
                for nm in mlp_param_names(l) {
                    grads.remove(&nm);
                }
            }
        }
        for (l, g) in gate_grads {
            for (nm, t) in g.named_params() {
                grads.insert(format!("gate.{l}.{nm}"), t.clone());
            }
        }
        Ok(grads)
    }

    fn mlp_backward(
        &self,
        l: usize,
        lc: &LayerCache<T>,
        ov: Option<&MlpOverride<T>>,
        dy: &Matrix<T>,
        grads: &mut BTreeMap<String, Tensor<T>>,
        gate_grads: &mut BTreeMap<usize, SoftGate<T>>,
    ) -> Result<Matrix<T>> {
        let n = dy.rows();
        let d = self.config.d_model;
        let x = &lc.mlp_in;
        let activation = self.config.activation;
        let kind = ov.map(|o| &o.kind).unwrap_or(&OverrideKind::None);
        let mut dx = Matrix::zeros(n, d);
        match (&lc.mlp, kind) {
            (MlpCache::Full { pre, act }, _) => {
                self.full_mlp_backward(l, x, pre, act, dy, activation, grads, &mut dx);
            }
            (MlpCache::Linear, OverrideKind::AllLinear(s)) => {
                for t in 0..n {
                    s.backward_input_into(dy.row(t), dx.row_mut(t));
                }
            }
            (
                MlpCache::Hard {
                    route_linear,
                    pre,
                    act,
                },
                OverrideKind::HardGated { surrogate, .. },
            ) => {
                let mut dy_mlp = dy.clone();
                for t in 0..n {
                    if route_linear[t] {
                        surrogate.backward_input_into(dy.row(t), dx.row_mut(t));
                        dy_mlp.row_mut(t).fill(T::zero());
                    }
                }
                self.full_mlp_backward(l, x, pre, act, &dy_mlp, activation, grads, &mut dx);
            }
            (
                MlpCache::Soft {
                    pre,
                    act,
                    mlp_out,
                    lin_out,
                    traces,
                },
                OverrideKind::SoftGated { surrogate, gate },
            ) => {
                let gg = gate_grads.entry(l).or_insert_with(|| gate.zeros_like());
                let mut dy_mlp = Matrix::zeros(n, d);
                let mut dy_lin = vec![T::zero(); d];
                for t in 0..n {
                    let g = traces[t].g;
                    let dyr = dy.row(t);
                    let mut dg = T::zero();
                    for j in 0..d {
                        dg += dyr[j] * (mlp_out[(t, j)] - lin_out[(t, j)]);
                        dy_mlp[(t, j)] = g * dyr[j];
                        dy_lin[j] = (T::one() - g) * dyr[j];
                    }
                    surrogate.backward_input_into(&dy_lin, dx.row_mut(t));
                    let dlogit = dg * g * (T::one() - g);
                    gate.backward(x.row(t), &traces[t], dlogit, gg, dx.row_mut(t));
                }
                self.full_mlp_backward(l, x, pre, act, &dy_mlp, activation, grads, &mut dx);
            }
            (MlpCache::Replaced, _) => {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} uses an opaque replacement and cannot be differentiated"
                )));
            }
            _ => unreachable!("cache kind matches the override used in forward"),
        }
        Ok(dx)
    }

    #[allow(clippy::too_many_arguments)]
    fn full_mlp_backward(
        &self,
        l: usize,
        x: &Matrix<T>,
        pre: &Matrix<T>,
        act: &Matrix<T>,
        dy: &Matrix<T>,
        activation: Activation,
        grads: &mut BTreeMap<String, Tensor<T>>,
        dx: &mut Matrix<T>,
    ) {
        let [n_fc, n_bfc, n_proj, n_bproj] = mlp_param_names(l);
        let w_fc = self.p(&n_fc);
        let w_proj = self.p(&n_proj);
        let (mut g_proj, mut g_bproj) = take_pair(grads, &n_proj, &n_bproj);
        let dact = linear_rows_backward(dy, act, w_proj, &mut g_proj, &mut g_bproj);
        grads.insert(n_proj, g_proj);
        grads.insert(n_bproj, g_bproj);
        let mut dpre = dact;
        for t in 0..dpre.rows() {
            for (g, &z) in dpre.row_mut(t).iter_mut().zip(pre.row(t)) {
                *g *= activation.derivative(z);
            }
        }
        let (mut g_fc, mut g_bfc) = take_pair(grads, &n_fc, &n_bfc);
        let dxm = linear_rows_backward(&dpre, x, w_fc, &mut g_fc, &mut g_bfc);
        grads.insert(n_fc, g_fc);
        grads.insert(n_bfc, g_bfc);
        add_into(dx, &dxm);
    }

    fn attention_backward(
        &self,
        l: usize,
        lc: &LayerCache<T>,
        r: &LayerRefs<'_, T>,
        dout: &Matrix<T>,
        grads: &mut BTreeMap<String, Tensor<T>>,
    ) -> Matrix<T> {
        let cfg = &self.config;
        let n = dout.rows();
        let hd = cfg.head_dim();
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let name = |s: &str| format!("layers.{l}.attn.{s}");

        let (mut gwo, mut gbo) = take_pair(grads, &name("w_o"), &name("b_o"));
        let dconcat = linear_rows_backward(dout, &lc.attn_concat, r.w[3], &mut gwo, &mut gbo);
        grads.insert(name("w_o"), gwo);
        grads.insert(name("b_o"), gbo);

        let mut dq = Matrix::zeros(n, cfg.d_model);
        let mut dk = Matrix::zeros(n, cfg.d_model);
        let mut dv = Matrix::zeros(n, cfg.d_model);
        let mut dp = vec![T::zero(); n];
        for h in 0..cfg.n_heads {
            let off = h * hd;
            let p = &lc.probs[h];
            for t in 0..n {
                let dot_t = &dconcat.row(t)[off..off + hd];
                let prow = p.row(t);
                // dP[t][u] = do_t · v_u and dV_u += P[t][u] do_t.
                let mut acc = T::zero();
                for u in 0..=t {
                    let vu = &lc.v.row(u)[off..off + hd];
                    let mut s = T::zero();
                    for (&a, &b) in dot_t.iter().zip(vu) {
                        s += a * b;
                    }
                    dp[u] = s;
                    acc += s * prow[u];
                    let pu = prow[u];
                    let dvu = &mut dv.row_mut(u)[off..off + hd];
                    for (g, &a) in dvu.iter_mut().zip(dot_t) {
                        *g += pu * a;
                    }
                }
                // Softmax backward, then the scaled dot products.
                let qt: Vec<T> = lc.q.row(t)[off..off + hd].to_vec();
                for u in 0..=t {
                    let ds = prow[u] * (dp[u] - acc) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let ku: Vec<T> = lc.k.row(u)[off..off + hd].to_vec();
                    {
                        let dqt = &mut dq.row_mut(t)[off..off + hd];
                        for (g, &kk) in dqt.iter_mut().zip(&ku) {
                            *g += ds * kk;
                        }
                    }
                    let dku = &mut dk.row_mut(u)[off..off + hd];
                    for (g, &qq) in dku.iter_mut().zip(&qt) {
                        *g += ds * qq;
                    }
                }
            }
        }
        if cfg.pos_encoding == PosEncoding::Rotary {
            rotary(&mut dq, cfg.n_heads, true);
            rotary(&mut dk, cfg.n_heads, true);
        }
        let mut da = Matrix::zeros(n, cfg.d_model);
        for (i, (dm, wname, bname)) in [
            (&dq, "w_q", "b_q"),
            (&dk, "w_k", "b_k"),
            (&dv, "w_v", "b_v"),
        ]
        .into_iter()
        .enumerate()
        {
            let (mut gw, mut gb) = take_pair(grads, &name(wname), &name(bname));
            let d = linear_rows_backward(dm, &lc.attn_in, r.w[i], &mut gw, &mut gb);
            grads.insert(name(wname), gw);
            grads.insert(name(bname), gb);
            add_into(&mut da, &d);
        }
        da
    }
}

fn take_pair<T: Scalar>(
    grads: &mut BTreeMap<String, Tensor<T>>,
    a: &str,
    b: &str,
) -> (Tensor<T>, Tensor<T>) {
    (
        grads.remove(a).expect("gradient slot exists"),
        grads.remove(b).expect("gradient slot exists"),
    )
}

fn add_into<T: Scalar>(a: &mut Matrix<T>, b: &Matrix<T>) {
    for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x += y;
    }
}
