mod common;

use std::sync::Arc;

use common::{random_tokens, scrambled};
use linmlp::model::{
    collapse_mlp_affine, Activation, CaptureRequest, MlpOverride, Model, ModelConfig, OverrideKind,
    PosEncoding, Replacement, Wiring,
};
use linmlp::surrogate::LinearSurrogate;
use proptest::prelude::*;

type V = Vec<f64>;

/// Straight-line forward pass written from the architecture description,
/// sharing no code with the library.
fn reference_logits(m: &Model<f64>, tokens: &[u32]) -> Vec<V> {
    let c = &m.config;
    let p = |n: &str| &m.params[n].data;
    let d = c.d_model;
    let n = tokens.len();
    let hd = d / c.n_heads;
    let lin = |w: &[f64], b: &[f64], x: &[f64], out: usize| -> V {
        (0..out)
            .map(|o| b[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>())
            .collect()
    };
    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> V {
        let mu = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / x.len() as f64;
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j])
            .collect()
    };
    let act = |z: f64| match c.activation {
        Activation::Identity => z,
        Activation::GeluTanh => {
            0.5 * z
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh())
        }
    };
    let rot = |v: &mut V, pos: usize| {
        for h in 0..c.n_heads {
            for i in 0..hd / 2 {
                let theta = pos as f64 / 10000f64.powf(2.0 * i as f64 / hd as f64);
                let (a, b) = (v[h * hd + i], v[h * hd + i + hd / 2]);
                v[h * hd + i] = a * theta.cos() - b * theta.sin();
                v[h * hd + i + hd / 2] = a * theta.sin() + b * theta.cos();
            }
        }
    };

    let mut h: Vec<V> = (0..n)
        .map(|t| {
            let tok = &p("tok_emb")[tokens[t] as usize * d..][..d];
            match c.pos_encoding {
                PosEncoding::Learned => {
                    let pe = &p("pos_emb")[t * d..][..d];
                    tok.iter().zip(pe).map(|(a, b)| a + b).collect()
                }
                PosEncoding::Rotary => tok.to_vec(),
            }
        })
        .collect();

    for l in 0..c.n_layers {
        let k = |s: &str| format!("layers.{l}.{s}");
        let attn = |h: &[V]| -> Vec<V> {
            let a: Vec<V> = h
                .iter()
                .map(|x| ln(x, p(&k("ln1.weight")), p(&k("ln1.bias"))))
                .collect();
            let mut q: Vec<V> = a
                .iter()
                .map(|x| lin(p(&k("attn.w_q")), p(&k("attn.b_q")), x, d))
                .collect();
            let mut kk: Vec<V> = a
                .iter()
                .map(|x| lin(p(&k("attn.w_k")), p(&k("attn.b_k")), x, d))
                .collect();
            let v: Vec<V> = a
                .iter()
                .map(|x| lin(p(&k("attn.w_v")), p(&k("attn.b_v")), x, d))
                .collect();
            if c.pos_encoding == PosEncoding::Rotary {
                for t in 0..n {
                    rot(&mut q[t], t);
                    rot(&mut kk[t], t);
                }
            }
            (0..n)
                .map(|t| {
                    let mut o = vec![0.0; d];
                    for hh in 0..c.n_heads {
                        let r = hh * hd..(hh + 1) * hd;
                        let s: V = (0..=t)
                            .map(|u| {
                                q[t][r.clone()]
                                    .iter()
                                    .zip(&kk[u][r.clone()])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>()
                                    / (hd as f64).sqrt()
                            })
                            .collect();
                        let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                        let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                        for u in 0..=t {
                            let w = (s[u] - mx).exp() / z;
                            for j in r.clone() {
                                o[j] += w * v[u][j];
                            }
                        }
                    }
                    lin(p(&k("attn.w_o")), p(&k("attn.b_o")), &o, d)
                })
                .collect()
        };
        let mlp = |x: &V| -> V {
            let x = ln(x, p(&k("ln2.weight")), p(&k("ln2.bias")));
            let hid: V = lin(p(&k("mlp.w_fc")), p(&k("mlp.b_fc")), &x, c.d_mlp)
                .into_iter()
                .map(act)
                .collect();
            lin(p(&k("mlp.w_proj")), p(&k("mlp.b_proj")), &hid, d)
        };
        let a = attn(&h);
        h = match c.wiring {
            Wiring::Sequential => h
                .iter()
                .zip(&a)
                .map(|(x, y)| {
                    let mid: V = x.iter().zip(y).map(|(p, q)| p + q).collect();
                    let m = mlp(&mid);
                    mid.iter().zip(&m).map(|(p, q)| p + q).collect()
                })
                .collect(),
            Wiring::Parallel => h
                .iter()
                .zip(&a)
                .map(|(x, y)| {
                    let m = mlp(x);
                    (0..d).map(|j| x[j] + y[j] + m[j]).collect()
                })
                .collect(),
        };
    }
    h.iter()
        .map(|x| {
            let f = ln(x, p("ln_f.weight"), p("ln_f.bias"));
            lin(p("lm_head"), &vec![0.0; c.vocab_size], &f, c.vocab_size)
        })
        .collect()
}

fn max_diff(a: &linmlp::Matrix64, b: &[V]) -> f64 {
    let mut m: f64 = 0.0;
    for (t, row) in b.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m = m.max((a[(t, j)] - v).abs());
        }
    }
    m
}

fn small(cfg_fn: fn(usize, usize, usize, usize) -> ModelConfig) -> ModelConfig {
    let mut c = cfg_fn(16, 2, 4, 32);
    c.vocab_size = 64;
    c
}

#[test]
fn matches_reference_both_wirings() {
    for (i, cfg) in [small(ModelConfig::gpt2_like), small(ModelConfig::neox_like)]
        .into_iter()
        .enumerate()
    {
        let m = scrambled(cfg, 30 + i as u64, 0.3);
        let tokens = random_tokens(20, 64, 5);
        let out = m.forward(&tokens, &[], &CaptureRequest::none()).unwrap();
        let diff = max_diff(&out.logits, &reference_logits(&m, &tokens));
        assert!(diff < 1e-10, "config {i}: {diff:e}");
    }
}

#[test]
fn zero_depth_model() {
    let mut cfg = small(ModelConfig::gpt2_like);
    cfg.n_layers = 0;
    let m = scrambled(cfg, 3, 0.5);
    let tokens = random_tokens(9, 64, 1);
    let out = m.forward(&tokens, &[], &CaptureRequest::none()).unwrap();
    assert!(max_diff(&out.logits, &reference_logits(&m, &tokens)) < 1e-12);
}

#[test]
fn wirings_differ() {
    let a = scrambled(small(ModelConfig::gpt2_like), 8, 0.3);
    let mut b = a.clone();
    b.config.wiring = Wiring::Parallel;
    let tokens = random_tokens(12, 64, 2);
    let la = a
        .forward(&tokens, &[], &CaptureRequest::none())
        .unwrap()
        .logits;
    let lb = b
        .forward(&tokens, &[], &CaptureRequest::none())
        .unwrap()
        .logits;
    assert!(la.max_abs_diff(&lb) > 1e-3);
}

#[test]
fn capture_does_not_perturb_logits() {
    let m = scrambled(small(ModelConfig::neox_like), 4, 0.3);
    let tokens = random_tokens(16, 64, 3);
    let plain = m.forward(&tokens, &[], &CaptureRequest::none()).unwrap();
    let cap = m
        .forward(&tokens, &[], &CaptureRequest::layers(&[0, 1]))
        .unwrap();
    assert_eq!(plain.logits, cap.logits);
    assert_eq!(cap.captures[&1].x.rows(), 16);
}

#[test]
fn exact_surrogate_override_is_transparent() {
    let mut cfg = small(ModelConfig::gpt2_like);
    cfg.activation = Activation::Identity;
    let m = scrambled(cfg, 6, 0.3);
    let (a, b) = collapse_mlp_affine(&m.mlp_params(1).unwrap()).unwrap();
    let s = Arc::new(LinearSurrogate::from_affine(1, &a, b));
    let tokens = random_tokens(16, 64, 4);
    let base = m
        .forward(&tokens, &[], &CaptureRequest::none())
        .unwrap()
        .logits;
    let lin = m
        .forward(
            &tokens,
            &[MlpOverride::all_linear(s)],
            &CaptureRequest::none(),
        )
        .unwrap()
        .logits;
    assert!(base.max_abs_diff(&lin) < 1e-10);
}

#[test]
fn lookup_replacement_reproduces_baseline() {
    let m = scrambled(small(ModelConfig::gpt2_like), 7, 0.3);
    let tokens = random_tokens(16, 64, 5);
    let base = m
        .forward(&tokens, &[], &CaptureRequest::layers(&[0]))
        .unwrap();
    let cap = base.captures[&0].clone();
    let table: Vec<(Vec<f64>, Vec<f64>)> = (0..cap.x.rows())
        .map(|t| (cap.x.row(t).to_vec(), cap.y.row(t).to_vec()))
        .collect();
    let lookup = move |x: &[f64]| -> Vec<f64> {
        table
            .iter()
            .find(|(k, _)| k == x)
            .expect("seen input")
            .1
            .clone()
    };
    let ov = MlpOverride {
        layer: 0,
        kind: OverrideKind::Replace(Arc::new(lookup) as Arc<dyn Replacement<f64>>),
    };
    let out = m.forward(&tokens, &[ov], &CaptureRequest::none()).unwrap();
    assert_eq!(out.logits, base.logits);
}

#[test]
fn rejects_bad_inputs() {
    let m = scrambled(small(ModelConfig::gpt2_like), 9, 0.3);
    assert!(m.forward(&[64], &[], &CaptureRequest::none()).is_err());
    assert!(m.forward(&[0; 33], &[], &CaptureRequest::none()).is_err());
    let (a, b) = collapse_mlp_affine(&m.mlp_params(0).unwrap()).unwrap();
    let mut s = LinearSurrogate::from_affine(0, &a, b);
    s.layer = 5;
    let ov = MlpOverride {
        layer: 5,
        kind: OverrideKind::AllLinear(Arc::new(s)),
    };
    assert!(matches!(
        m.forward(&[1, 2], &[ov], &CaptureRequest::none()),
        Err(linmlp::Error::LayerOutOfRange { layer: 5, .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_and_deterministic(seed in 0u64..1000, cut in 1usize..12, new_tok in 0u32..64) {
        let cfg = if seed % 2 == 0 { small(ModelConfig::gpt2_like) } else { small(ModelConfig::neox_like) };
        let m = scrambled(cfg, seed, 0.3);
        let tokens = random_tokens(12, 64, seed);
        let a = m.forward(&tokens, &[], &CaptureRequest::none()).unwrap().logits;
        let again = m.forward(&tokens, &[], &CaptureRequest::none()).unwrap().logits;
        prop_assert_eq!(&a, &again);
        let mut changed = tokens.clone();
        changed[cut] = new_tok;
        let b = m.forward(&changed, &[], &CaptureRequest::none()).unwrap().logits;
        for t in 0..cut {
            prop_assert_eq!(a.row(t), b.row(t));
        }
    }
}
