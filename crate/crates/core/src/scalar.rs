//! Floating-point abstraction the numeric core is generic over.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Scalar type for all tensors, parameters and losses: `f32` or `f64`.
///
/// `f64` is the reference precision (gradient checks, checkpoint round-trips
/// and the training engine run at `f64`); `f32` is available for cheap
/// forward-only workloads such as full-profile shape checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to Scalar")
    }

    fn cast_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize converts to Scalar")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
