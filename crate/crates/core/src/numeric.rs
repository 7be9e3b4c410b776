//! Scalar abstraction for the numeric kernels.

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating point scalar usable by the statistics and attribution kernels:
/// `f32` or `f64`.
pub trait Scalar: Float + FromPrimitive + NumCast + std::fmt::Debug + Send + Sync + 'static {
    /// Converts a count or an `f64` constant into the scalar type.
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite literal")
    }

    fn to_f64_lossy(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
