//! Scalar abstraction shared by the numeric modules.
//!
//! Everything that does math (beliefs, flows, models, learners) is generic over
//! [`Real`], which is implemented for `f32` and `f64`. Tolerances quoted in the
//! docs and tests assume `f64`.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use std::iter::Sum;

/// Floating-point scalar usable by every numeric module of the crate.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    /// Lossy conversion to `f64`, used for reporting and serialization.
    #[inline]
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Logistic sigmoid `1 / (1 + exp(-t))`, evaluated without overflow.
    #[inline]
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}
