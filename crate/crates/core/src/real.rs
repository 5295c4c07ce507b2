//! Floating point element types.
//!
//! Everything numeric is generic over [`Real`] so the same code runs at 64-bit
//! for gradient checking and at 32-bit for faster training.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive};

pub trait Real:
    Float + FloatConst + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Tag written into checkpoints.
    const DTYPE: u8;
    const NAME: &'static str;
    const BYTES: usize;

    fn from_f64_lossy(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: u8 = 0;
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: u8 = 1;
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Shorthand for converting literals.
#[inline]
pub fn r<T: Real>(x: f64) -> T {
    T::from_f64_lossy(x)
}
