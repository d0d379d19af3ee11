//! Scalar abstraction: every numerical routine in this crate is generic over
//! `f32`/`f64` through this trait.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar usable throughout the toolkit.
///
/// `f32` is the workhorse for reconstruction runs; `f64` backs the
/// finite-difference and adjointness oracles.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Send + Sync + Debug + Display + Default + 'static
    + rustfft::FftNum
{
    /// Shorthand conversion from `f64` literals and intermediate values.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    /// Lossy view as `f64` for reporting and file I/O.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}
