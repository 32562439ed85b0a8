use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::LinalgScalar;
use num_traits::Float;

/// Floating point element type of layers and models.
///
/// Training runs in `f32`; gradient checks run the same code in `f64`.
pub trait Real:
    Float
    + LinalgScalar
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Width in bytes, also used as the dtype tag in checkpoints.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the first `BYTES` bytes of `bytes`.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_bits().to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[..4]);
        f32::from_bits(u32::from_le_bytes(b))
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_bits().to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_bits(u64::from_le_bytes(b))
    }
}
