//! Scalar abstraction for the numeric core.
//!
//! Everything downstream is generic over [`Scalar`] so the same estimators run in
//! `f32` or `f64` (concrete aliases live at the crate root). The trait is a thin
//! bundle of `nalgebra::RealField` (which supplies the transcendental functions and
//! the num-traits arithmetic hierarchy) plus the primitive conversions the solvers
//! need for tolerances and reporting.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use std::iter::Sum;

/// Floating-point scalar usable by every estimator in this crate.
pub trait Scalar:
    RealField + FromPrimitive + ToPrimitive + Copy + Default + Sum<Self> + Send + Sync
{
    /// Converts an `f64` constant (tolerance, kernel coefficient, ...) into `Self`.
    fn cast(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 constant representable in scalar type")
    }

    /// Converts a count into `Self`; counts in this crate always fit.
    fn from_count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count representable in scalar type")
    }

    /// Lossy view as `f64`, for diagnostics and error messages.
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
