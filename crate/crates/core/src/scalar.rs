use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point element type of tensors and layers: `f32` or `f64`.
///
/// Training math runs in `f64`; `f32` exists for compact inference models.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Width in bytes of the serialized representation.
    const BYTES: u8;

    /// Converts an `f64` literal into this type, rounding if needed.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const BYTES: u8 = 4;
}

impl Scalar for f64 {
    const BYTES: u8 = 8;
}
