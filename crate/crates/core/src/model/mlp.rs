use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Activation, Tensor};
use crate::scalar::Scalar;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Tanh-approximated GELU, as used by GPT-2.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let x3 = x * x * x;
    let u = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_COEF) * x3);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_COEF) * x * x * x);
    let th = u.tanh();
    let du = T::of(SQRT_2_OVER_PI) * (T::one() + T::of(3.0 * GELU_COEF) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

/// Borrowed view of one layer's MLP weights.
#[derive(Clone, Copy, Debug)]
pub struct MlpParams<'a, T> {
    pub w_fc: &'a Tensor<T>,
    pub b_fc: &'a Tensor<T>,
    pub w_proj: &'a Tensor<T>,
    pub b_proj: &'a Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> MlpParams<'_, T> {
    pub fn d_model(&self) -> usize {
        self.w_fc.dims2().1
    }

    pub fn d_mlp(&self) -> usize {
        self.w_fc.dims2().0
    }

    fn check(&self) -> Result<()> {
        let (h, d) = self.w_fc.dims2();
        let ok = self.b_fc.shape == [h] && self.w_proj.shape == [d, h] && self.b_proj.shape == [d];
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "inconsistent MLP shapes: w_fc {:?}, b_fc {:?}, w_proj {:?}, b_proj {:?}",
                self.w_fc.shape, self.b_fc.shape, self.w_proj.shape, self.b_proj.shape
            )))
        }
    }
}

/// Hidden pre-activations `W_fc x + b_fc` written into `pre`.
#[inline]
pub(crate) fn mlp_hidden<T: Scalar>(p: &MlpParams<'_, T>, x: &[T], pre: &mut [T]) {
    for (j, h) in pre.iter_mut().enumerate() {
        let w = p.w_fc.row(j);
        let mut s = p.b_fc.data[j];
        for (&a, &b) in w.iter().zip(x) {
            s += a * b;
        }
        *h = s;
    }
}

/// `W_proj · act` + `b_proj` written into `out`.
#[inline]
pub(crate) fn mlp_project<T: Scalar>(p: &MlpParams<'_, T>, act: &[T], out: &mut [T]) {
    for (i, o) in out.iter_mut().enumerate() {
        let w = p.w_proj.row(i);
        let mut s = p.b_proj.data[i];
        for (&a, &b) in w.iter().zip(act) {
            s += a * b;
        }
        *o = s;
    }
}

/// `W_proj · σ(W_fc · x + b_fc) + b_proj`.
pub fn mlp_forward<T: Scalar>(x: &[T], p: &MlpParams<'_, T>) -> Result<Vec<T>> {
    p.check()?;
    if x.len() != p.d_model() {
        return Err(Error::Shape(format!(
            "MLP input of length {} for d_model {}",
            x.len(),
            p.d_model()
        )));
    }
    let mut pre = vec![T::zero(); p.d_mlp()];
    mlp_hidden(p, x, &mut pre);
    for v in pre.iter_mut() {
        *v = p.activation.apply(*v);
    }
    let mut out = vec![T::zero(); p.d_model()];
    mlp_project(p, &pre, &mut out);
    Ok(out)
}

/// The affine map the MLP would be without its nonlinearity:
/// `A = W_proj · W_fc`, `b = W_proj · b_fc + b_proj`.
///
/// `A` is returned in the `[out, in]` orientation (`y = A x + b`).
pub fn collapse_mlp_affine<T: Scalar>(p: &MlpParams<'_, T>) -> Result<(Matrix<T>, Vec<T>)> {
    p.check()?;
    let w_proj = p.w_proj.to_matrix();
    let a = w_proj.matmul(&p.w_fc.to_matrix())?;
    let mut b = w_proj.matvec(&p.b_fc.data)?;
    for (v, &bp) in b.iter_mut().zip(&p.b_proj.data) {
        *v += bp;
    }
    Ok((a, b))
}
