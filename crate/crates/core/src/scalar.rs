//! Scalar abstraction for the geometric and numerical code.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar the pipeline math is generic over.
///
/// Implemented for `f32` and `f64`. Conversions from `f64` literals are
/// lossy for `f32` in the usual way; everything observable stays
/// deterministic because sampling and parsing happen in `f64` before
/// conversion.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Converts a finite `f64` literal or intermediate, rounding for `f32`.
    fn cast(v: f64) -> Self {
        FromPrimitive::from_f64(v).expect("finite f64 converts to scalar")
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::cast(v as f64)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn half() -> Self {
        Self::cast(0.5)
    }

    fn two() -> Self {
        Self::cast(2.0)
    }

    fn clamp01(self) -> Self {
        self.max(Self::zero()).min(Self::one())
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssignOps
        + std::fmt::Debug
        + std::fmt::Display
        + Send
        + Sync
        + 'static
{
}
