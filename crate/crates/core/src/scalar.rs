//! Scalar abstraction for the numerical kernels.
//!
//! Geometry, warping and factorization are written against [`Scalar`] so they
//! run in `f32` or `f64`. The dataset model and the network are fixed to
//! [`Real`](crate::Real).

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type usable by the numerical kernels: `f32` or `f64`.
pub trait Scalar: RealField + Copy + FromPrimitive + ToPrimitive + 'static {
    /// Converts an `f64` literal. Panics only if the type cannot represent finite `f64`s.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar conversion from f64")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn is_finite_scalar(self) -> bool {
        self.to_f64().is_some_and(f64::is_finite)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Returns `true` when every element is finite.
pub fn all_finite<T: Scalar>(values: impl IntoIterator<Item = T>) -> bool {
    values.into_iter().all(Scalar::is_finite_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_round_trips() {
        assert_eq!(f32::lit(0.5), 0.5f32);
        assert_eq!(f64::lit(-3.25), -3.25);
        assert!(!all_finite([1.0f64, f64::NAN]));
        assert!(all_finite([1.0f32, 2.0]));
    }
}
