//! Floating point abstraction shared by the geometric and numerical kernels.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar usable by the kinematics, calibration and phantom geometry: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal. Every finite `f64` is representable (possibly rounded) in both impls.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn idx(n: usize) -> Self {
        Self::lit(n as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Clamps `x` into `[lo, hi]`.
#[inline]
pub fn clamp<T: Scalar>(x: T, lo: T, hi: T) -> T {
    x.max(lo).min(hi)
}
