//! Scalar abstraction for the numeric core.
//!
//! All model math is generic over [`Scalar`] so the same code instantiates
//! at `f32` or `f64`. The crate-root aliases pin the shipped configuration
//! to `f64`: the likelihood integral and the low-FPR tail of the ROC are
//! precision-sensitive, and memory is irrelevant at this scale.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Convert an `f64` literal into this scalar type.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 literal converts to any Scalar")
    }

    /// Lossless-enough round trip for persistence (text formats store f64).
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Sum that does not require `std::iter::Sum` on the scalar type.
pub fn sum<F: Scalar>(values: &[F]) -> F {
    values.iter().fold(F::zero(), |acc, &v| acc + v)
}

/// Euclidean norm of a flat slice.
pub fn l2_norm<F: Scalar>(values: &[F]) -> F {
    values
        .iter()
        .fold(F::zero(), |acc, &v| acc + v * v)
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_convert() {
        assert_eq!(<f64 as Scalar>::lit(0.5), 0.5);
        assert_eq!(<f32 as Scalar>::lit(0.5), 0.5f32);
    }

    #[test]
    fn l2_norm_matches_hand_value() {
        assert!((l2_norm(&[3.0f64, 4.0]) - 5.0).abs() < 1e-15);
    }
}
