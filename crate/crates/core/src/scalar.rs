use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type for all embedding, loss and adapter math: `f32` or `f64`.
///
/// The training pipeline runs in `f64`; `f32` is supported for inference-style use
/// where the looser [`Scalar::unit_tolerance`] is acceptable.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Allowed deviation of `‖v‖₂` from 1 for a vector flagged as normalized.
    fn unit_tolerance() -> Self;

    /// Norms below this are treated as zero by normalization.
    fn zero_norm_threshold() -> Self;

    /// Lossless-enough conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f64 {
    fn unit_tolerance() -> Self {
        1e-9
    }

    fn zero_norm_threshold() -> Self {
        1e-12
    }
}

impl Scalar for f32 {
    fn unit_tolerance() -> Self {
        1e-5
    }

    fn zero_norm_threshold() -> Self {
        1e-12
    }
}
