//! Scalar abstraction for the numeric core.

use num_traits::{Float, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the tensor, convolution, and layer code is generic
/// over. Certificates are only meaningful in `f64`; the `f32` instantiation
/// exists for cheap forward passes and cross-checks.
pub trait Scalar:
    Float + NumAssignOps + Sum<Self> + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
