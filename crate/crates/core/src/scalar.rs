//! Floating-point element types usable by every tensor, network and metric.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// f32 or f64.
///
/// Matrix products go through `ndarray::linalg::general_mat_mul`, which
/// dispatches both concrete types to an optimized GEMM kernel.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoints so weights are never reinterpreted.
    const DTYPE: &'static str;

    /// Converts a literal; every f64 is representable (possibly rounded).
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the front of `bytes`, returning the rest.
    fn read_le(bytes: &[u8]) -> Option<(Self, &[u8])>;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Option<(Self, &[u8])> {
        let (head, rest) = bytes.split_first_chunk::<4>()?;
        Some((f32::from_le_bytes(*head), rest))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Option<(Self, &[u8])> {
        let (head, rest) = bytes.split_first_chunk::<8>()?;
        Some((f64::from_le_bytes(*head), rest))
    }
}
