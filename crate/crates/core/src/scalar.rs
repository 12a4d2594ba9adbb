//! Accumulation scalars.
//!
//! Tensor arithmetic is written once against [`Scalar`] and instantiated for
//! `f32` and `f64`. Storage dtypes are decoded into the accumulation scalar
//! (promotion) and encoded back with a single rounding step.

use std::fmt::Debug;
use std::iter::Sum;

use half::{bf16, f16};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::dtype::Dtype;

/// Floating point type used to accumulate element-wise tensor arithmetic.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// The storage dtype with the same representation.
    const DTYPE: Dtype;

    /// Widens an `f32` value. Exact for every implementor.
    fn from_f32_exact(v: f32) -> Self;

    /// Converts from `f64` with round-to-nearest-even.
    fn from_f64_round(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn from_f32_exact(v: f32) -> Self {
        v
    }

    #[inline]
    fn from_f64_round(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn from_f32_exact(v: f32) -> Self {
        v as f64
    }

    #[inline]
    fn from_f64_round(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Decodes little-endian `bytes` of `dtype` into `out`, promoting to `A`.
///
/// `bytes.len()` must equal `out.len() * dtype.byte_width()`.
pub fn decode_into<A: Scalar>(dtype: Dtype, bytes: &[u8], out: &mut [A]) {
    assert_eq!(bytes.len(), out.len() * dtype.byte_width());
    match dtype {
        Dtype::F64 => {
            for (o, c) in out.iter_mut().zip(bytes.chunks_exact(8)) {
                *o = A::from_f64_round(f64::from_le_bytes(c.try_into().unwrap()));
            }
        }
        Dtype::F32 => {
            for (o, c) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                *o = A::from_f32_exact(f32::from_le_bytes(c.try_into().unwrap()));
            }
        }
        Dtype::Bf16 => {
            for (o, c) in out.iter_mut().zip(bytes.chunks_exact(2)) {
                let v = bf16::from_bits(u16::from_le_bytes([c[0], c[1]]));
                *o = A::from_f32_exact(v.to_f32());
            }
        }
        Dtype::F16 => {
            for (o, c) in out.iter_mut().zip(bytes.chunks_exact(2)) {
                let v = f16::from_bits(u16::from_le_bytes([c[0], c[1]]));
                *o = A::from_f32_exact(v.to_f32());
            }
        }
    }
}

/// Encodes `values` into little-endian `dtype` bytes with one rounding step.
pub fn encode_into<A: Scalar>(values: &[A], dtype: Dtype, out: &mut [u8]) {
    assert_eq!(out.len(), values.len() * dtype.byte_width());
    match dtype {
        Dtype::F64 => {
            for (v, c) in values.iter().zip(out.chunks_exact_mut(8)) {
                c.copy_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        Dtype::F32 => {
            for (v, c) in values.iter().zip(out.chunks_exact_mut(4)) {
                c.copy_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Dtype::Bf16 => {
            for (v, c) in values.iter().zip(out.chunks_exact_mut(2)) {
                c.copy_from_slice(&bf16::from_f64(v.as_f64()).to_bits().to_le_bytes());
            }
        }
        Dtype::F16 => {
            for (v, c) in values.iter().zip(out.chunks_exact_mut(2)) {
                c.copy_from_slice(&f16::from_f64(v.as_f64()).to_bits().to_le_bytes());
            }
        }
    }
}

/// Convenience wrapper around [`decode_into`] that allocates.
pub fn decode<A: Scalar>(dtype: Dtype, bytes: &[u8]) -> Vec<A> {
    let mut out = vec![A::zero(); bytes.len() / dtype.byte_width()];
    decode_into(dtype, bytes, &mut out);
    out
}

/// Convenience wrapper around [`encode_into`] that allocates.
pub fn encode<A: Scalar>(values: &[A], dtype: Dtype) -> Vec<u8> {
    let mut out = vec![0u8; values.len() * dtype.byte_width()];
    encode_into(values, dtype, &mut out);
    out
}

/// The narrowest accumulation scalar that promotes `dtype` without loss.
pub fn lossless_accumulator(dtype: Dtype) -> Dtype {
    match dtype {
        Dtype::F64 => Dtype::F64,
        _ => Dtype::F32,
    }
}
