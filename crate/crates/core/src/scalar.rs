use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for all numeric code in this crate.
///
/// Everything that does math is generic over this trait; `f32` is the
/// practical choice for training, `f64` for oracle and gradient tests.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion back to f64 for reporting and file output.
    fn to_f64(self) -> f64;

    /// Type tag recorded in checkpoint headers.
    fn dtype_name() -> &'static str;

    /// Fixed-width little-endian encoding used by checkpoints.
    fn write_le(self, buf: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const BYTE_WIDTH: usize;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn dtype_name() -> &'static str {
        "f32"
    }

    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    const BYTE_WIDTH: usize = 4;
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }

    fn dtype_name() -> &'static str {
        "f64"
    }

    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    const BYTE_WIDTH: usize = 8;
}

/// Shorthand for embedding an f64 literal into the generic scalar type.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}

/// Denominator guard of the attention-pooling formula. Fixed, not configurable.
pub fn attention_epsilon<T: Scalar>() -> T {
    lit(1e-5)
}

/// Clamp bound applied to predicted heatmap values before taking logs.
pub fn log_clamp<T: Scalar>() -> T {
    lit(1e-7)
}
