//! Floating-point element types accepted by matrices, models and surrogates.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating point: `f32` or `f64`.
///
/// Everything numeric in this crate is generic over `Scalar`. Reductions that
/// feed a log-probability (layer norm statistics, softmax, logits) are carried
/// out in `f64` regardless of the storage type.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self;

    /// Widening conversion to `f64`.
    fn wide(self) -> f64;

    /// Adjacent representable value above (`up`) or below.
    fn next(self, up: bool) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn next(self, up: bool) -> Self {
        if up {
            self.next_up()
        } else {
            self.next_down()
        }
    }

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn wide(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn next(self, up: bool) -> Self {
        if up {
            self.next_up()
        } else {
            self.next_down()
        }
    }

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn wide(self) -> f64 {
        self
    }
}
