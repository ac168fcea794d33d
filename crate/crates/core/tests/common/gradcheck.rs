//! Central-difference gradient oracle.

use std::collections::BTreeSet;

use linmlp::model::{MlpOverride, Model, OverrideKind};
use linmlp::training::loss_and_grads;

const ABS_FLOOR: f64 = 1e-5;

pub struct TensorCheck {
    pub name: String,
    pub rel_err: f64,
    pub norm: f64,
}

fn loss(model: &Model<f64>, batch: &[&[u32]], ov: &[MlpOverride<f64>]) -> f64 {
    loss_and_grads(model, batch, ov, &model.params.keys().cloned().collect())
        .unwrap()
        .0
}

fn gate_tensor<'a>(
    ov: &'a mut [MlpOverride<f64>],
    name: &str,
) -> Option<&'a mut linmlp::model::Tensor<f64>> {
    let rest = name.strip_prefix("gate.")?;
    let (l, p) = rest.split_once('.')?;
    let l: usize = l.parse().ok()?;
    ov.iter_mut()
        .find(|o| o.layer == l)
        .and_then(|o| match &mut o.kind {
            OverrideKind::SoftGated { gate, .. } => gate.param_mut(p),
            _ => None,
        })
}

/// Relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` for every tensor that
/// receives a gradient, perturbing each element by ±`eps`.
pub fn check_all(
    model: &Model<f64>,
    batch: &[&[u32]],
    overrides: &[MlpOverride<f64>],
    eps: f64,
) -> Vec<TensorCheck> {
    let (_, grads) = loss_and_grads(model, batch, overrides, &BTreeSet::new()).unwrap();
    let mut out = Vec::new();
    for (name, g) in &grads {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nf = 0.0;
        for i in 0..g.len() {
            let fd = {
                let mut m = model.clone();
                let mut ov = overrides.to_vec();
                let (plus, minus) = if let Some(t) = m.params.get_mut(name) {
                    let orig = t.data[i];
                    t.data[i] = orig + eps;
                    let p = loss(&m, batch, &ov);
                    m.params.get_mut(name).unwrap().data[i] = orig - eps;
                    (p, loss(&m, batch, &ov))
                } else {
                    let t = gate_tensor(&mut ov, name).expect("gradient names a gate");
                    let orig = t.data[i];
                    t.data[i] = orig + eps;
                    let p = loss(&m, batch, &ov);
                    gate_tensor(&mut ov, name).unwrap().data[i] = orig - eps;
                    (p, loss(&m, batch, &ov))
                };
                (plus - minus) / (2.0 * eps)
            };
            let a = g.data[i];
            diff += (a - fd) * (a - fd);
            na += a * a;
            nf += fd * fd;
        }
        // The key bias has an identically zero gradient without rotary
        // positions (softmax shift invariance); a floor keeps rounding noise
        // from reading as a relative error of 1.
        let denom = na.sqrt().max(nf.sqrt()).max(ABS_FLOOR);
        let rel_err = diff.sqrt() / denom;
        out.push(TensorCheck {
            name: name.clone(),
            rel_err,
            norm: na.sqrt(),
        });
    }
    out
}
