//! Minimal decoder-only transformer with per-layer MLP replacement.
//!
//! Two wirings are supported. Sequential (GPT-2):
//! `h' = h + Attn(LN₁(h)); h'' = h' + MLP(LN₂(h'))`.
//! Parallel (GPT-NeoX): `h' = h + Attn(LN₁(h)) + MLP(LN₂(h))`.
//!
//! Weight matrices are stored `[out, in]` and applied as `W x + b`.

mod forward;
pub mod io;
mod mlp;
mod overrides;
mod tensor;
pub mod tokenizer;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use forward::{
    cross_entropy, log_softmax, CaptureRequest, ForwardCache, ForwardOutput, LayerCapture,
};
pub use io::{
    load_weights, model_container, model_from_container, read_container, save_weights,
    write_container, Container, Dtype, TensorEntry,
};
pub use mlp::{collapse_mlp_affine, gelu, gelu_grad, mlp_forward, MlpParams};
pub use overrides::{
    ConstantGate, MlpOverride, OverrideKind, Replacement, RoutingGate, SoftGate, ThresholdGate,
};
pub use tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const ROTARY_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    Sequential,
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    Learned,
    Rotary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    GeluTanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::GeluTanh => gelu(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::GeluTanh => gelu_grad(x),
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub wiring: Wiring,
    pub pos_encoding: PosEncoding,
    pub activation: Activation,
}

impl ModelConfig {
    /// GPT-2-style config with `d_mlp = 4·d_model` and a byte vocabulary.
    pub fn gpt2_like(d_model: usize, n_layers: usize, n_heads: usize, max_seq: usize) -> Self {
        ModelConfig {
            d_model,
            n_layers,
            n_heads,
            d_mlp: 4 * d_model,
            vocab_size: tokenizer::BYTE_VOCAB,
            max_seq,
            wiring: Wiring::Sequential,
            pos_encoding: PosEncoding::Learned,
            activation: Activation::GeluTanh,
        }
    }

    /// NeoX-style config: parallel wiring with rotary positions.
    pub fn neox_like(d_model: usize, n_layers: usize, n_heads: usize, max_seq: usize) -> Self {
        ModelConfig {
            wiring: Wiring::Parallel,
            pos_encoding: PosEncoding::Rotary,
            ..Self::gpt2_like(d_model, n_layers, n_heads, max_seq)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_mlp == 0 || self.max_seq == 0 {
            return bad(format!("config has a zero dimension: {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.pos_encoding == PosEncoding::Rotary && self.head_dim() % 2 != 0 {
            return bad(format!(
                "rotary needs an even head dim, got {}",
                self.head_dim()
            ));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        Ok(())
    }

    /// Every parameter name with its expected shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![("tok_emb".to_string(), vec![self.vocab_size, d])];
        if self.pos_encoding == PosEncoding::Learned {
            out.push(("pos_emb".to_string(), vec![self.max_seq, d]));
        }
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("ln1.weight"), vec![d]));
            out.push((p("ln1.bias"), vec![d]));
            for w in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.w_{w}")), vec![d, d]));
                out.push((p(&format!("attn.b_{w}")), vec![d]));
            }
            out.push((p("ln2.weight"), vec![d]));
            out.push((p("ln2.bias"), vec![d]));
            out.push((p("mlp.w_fc"), vec![self.d_mlp, d]));
            out.push((p("mlp.b_fc"), vec![self.d_mlp]));
            out.push((p("mlp.w_proj"), vec![d, self.d_mlp]));
            out.push((p("mlp.b_proj"), vec![d]));
        }
        out.push(("ln_f.weight".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        out.push(("lm_head".to_string(), vec![self.vocab_size, d]));
        out
    }
}

/// Names of the four MLP tensors of one layer.
pub fn mlp_param_names(layer: usize) -> [String; 4] {
    [
        format!("layers.{layer}.mlp.w_fc"),
        format!("layers.{layer}.mlp.b_fc"),
        format!("layers.{layer}.mlp.w_proj"),
        format!("layers.{layer}.mlp.b_proj"),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Validates names, shapes and finiteness.
    pub fn new(config: ModelConfig, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if &t.shape != shape {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
        }
        if let Some(extra) = params
            .keys()
            .find(|k| !expected.iter().any(|(n, _)| n == *k))
        {
            return Err(Error::UnknownTensor(extra.clone()));
        }
        Ok(Model { config, params })
    }

    /// GPT-2-style initialization: N(0, 0.02) weights, output projections
    /// scaled by `1/√(2·n_layers)`, zero biases, unit LN gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, 0.02)
    }

    pub fn init_with_std(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj_std = std / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".weight") {
                vec![T::one(); n]
            } else if name.contains(".b_") || name.ends_with(".bias") {
                vec![T::zero(); n]
            } else {
                let s = if name.ends_with("w_o") || name.ends_with("w_proj") {
                    proj_std
                } else {
                    std
                };
                let dist = Normal::new(0.0, s).expect("positive std");
                (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
            };
            params.insert(name, Tensor::new(&shape, data)?);
        }
        Model::new(config, params)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub(crate) fn p(&self, name: &str) -> &Tensor<T> {
        &self.params[name]
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn mlp_params(&self, layer: usize) -> Result<MlpParams<'_, T>> {
        if layer >= self.config.n_layers {
            return Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.config.n_layers,
            });
        }
        let [w_fc, b_fc, w_proj, b_proj] = mlp_param_names(layer);
        Ok(MlpParams {
            w_fc: self.param(&w_fc)?,
            b_fc: self.param(&b_fc)?,
            w_proj: self.param(&w_proj)?,
            b_proj: self.param(&b_proj)?,
            activation: self.config.activation,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// True when every tensor matches `other` bit for bit.
    pub fn bit_eq(&self, other: &Model<T>) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .all(|(k, v)| other.params.get(k).is_some_and(|o| v.bit_eq(o)))
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfVocab {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::gpt2_like(16, 2, 4, 32);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::neox_like(12, 1, 4, 8);
        assert!(c.validate().is_err(), "head dim 3 cannot rotate");
        c.n_heads = 3;
        assert!(c.validate().is_ok());
        c.vocab_size = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_shapes_and_names() {
        let m = Model::<f64>::init(ModelConfig::gpt2_like(8, 2, 2, 16), 0).unwrap();
        assert!(m.params.contains_key("pos_emb"));
        assert_eq!(m.param("layers.1.mlp.w_fc").unwrap().shape, vec![32, 8]);
        let r = Model::<f64>::init(ModelConfig::neox_like(8, 2, 2, 16), 0).unwrap();
        assert!(!r.params.contains_key("pos_emb"));
    }

    #[test]
    fn new_rejects_bad_params() {
        let m = Model::<f32>::init(ModelConfig::gpt2_like(8, 1, 2, 4), 1).unwrap();
        let mut p = m.params.clone();
        p.insert("bogus".into(), Tensor::zeros(&[1]));
        assert!(
            matches!(Model::new(m.config.clone(), p), Err(Error::UnknownTensor(n)) if n == "bogus")
        );
        let mut p = m.params.clone();
        p.remove("ln_f.bias");
        assert!(matches!(
            Model::new(m.config.clone(), p),
            Err(Error::MissingParam(_))
        ));
        let mut p = m.params.clone();
        p.get_mut("lm_head").unwrap().data[0] = f32::NAN;
        assert!(Model::new(m.config.clone(), p).is_err());
    }
}
