//! Element-wise kernels over promoted tensor chunks.
//!
//! Work is split into fixed blocks of [`BLOCK`] elements, reduced per block
//! and folded in block order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::dtype::Dtype;
use crate::scalar::Scalar;

pub const BLOCK: usize = 4096;

/// Running statistics over two source tensors `a`, `b` and their difference
/// `a - b`, accumulated in `S`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats<S> {
    pub count: u64,
    pub diff_sq: S,
    pub diff_max_abs: S,
    pub dot: S,
    pub a_sq: S,
    pub b_sq: S,
}

impl<S: Scalar> Default for PairStats<S> {
    fn default() -> Self {
        Self {
            count: 0,
            diff_sq: S::zero(),
            diff_max_abs: S::zero(),
            dot: S::zero(),
            a_sq: S::zero(),
            b_sq: S::zero(),
        }
    }
}

impl<S: Scalar> PairStats<S> {
    #[inline]
    pub fn observe<A: Scalar>(&mut self, a: A, b: A, diff: A) {
        let (a, b, d) = (widen::<A, S>(a), widen::<A, S>(b), widen::<A, S>(diff));
        self.count += 1;
        self.diff_sq += d * d;
        // NaN must survive the max so non-finite inputs stay visible
        let ad = d.abs();
        if ad > self.diff_max_abs || ad.is_nan() {
            self.diff_max_abs = ad;
        }
        self.dot += a * b;
        self.a_sq += a * a;
        self.b_sq += b * b;
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.count += other.count;
        self.diff_sq += other.diff_sq;
        if other.diff_max_abs > self.diff_max_abs || other.diff_max_abs.is_nan() {
            self.diff_max_abs = other.diff_max_abs;
        }
        self.dot += other.dot;
        self.a_sq += other.a_sq;
        self.b_sq += other.b_sq;
        self
    }

    pub fn l2(&self) -> S {
        self.diff_sq.sqrt()
    }

    /// Cosine similarity of `a` and `b`, clamped to [-1, 1]. Two all-zero
    /// tensors count as identical (1); a zero tensor against a non-zero one
    /// is 0.
    pub fn cosine(&self) -> S {
        let denom = (self.a_sq * self.b_sq).sqrt();
        if denom.is_nan() || self.dot.is_nan() {
            return S::nan();
        }
        if denom == S::zero() {
            return if self.a_sq == self.b_sq { S::one() } else { S::zero() };
        }
        (self.dot / denom).max(-S::one()).min(S::one())
    }
}

#[inline]
fn widen<A: Scalar, S: Scalar>(v: A) -> S {
    S::from_f64_round(v.as_f64())
}

/// `out = a - b`, returning statistics of the pair.
pub fn subtract<A: Scalar, S: Scalar>(a: &[A], b: &[A], out: &mut [A]) -> PairStats<S> {
    assert!(a.len() == b.len() && a.len() == out.len());
    out.par_chunks_mut(BLOCK)
        .zip(a.par_chunks(BLOCK))
        .zip(b.par_chunks(BLOCK))
        .map(|((o, a), b)| {
            let mut s = PairStats::default();
            for ((o, &x), &y) in o.iter_mut().zip(a).zip(b) {
                let d = x - y;
                *o = d;
                s.observe(x, y, d);
            }
            s
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(PairStats::default(), PairStats::merge)
}

/// Statistics of `a - b` without materializing the difference.
pub fn compare<A: Scalar, S: Scalar>(a: &[A], b: &[A]) -> PairStats<S> {
    assert_eq!(a.len(), b.len());
    a.par_chunks(BLOCK)
        .zip(b.par_chunks(BLOCK))
        .map(|(a, b)| {
            let mut s = PairStats::default();
            for (&x, &y) in a.iter().zip(b) {
                s.observe(x, y, x - y);
            }
            s
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(PairStats::default(), PairStats::merge)
}

/// `target += alpha * delta` in place. Elements whose scaled delta is zero
/// are left untouched, so a zero residual or `alpha == 0` is a bit-exact
/// identity (including signed zeros).
pub fn scaled_add<A: Scalar>(target: &mut [A], delta: &[A], alpha: A) {
    assert_eq!(target.len(), delta.len());
    if alpha == A::zero() {
        return;
    }
    target
        .par_chunks_mut(BLOCK)
        .zip(delta.par_chunks(BLOCK))
        .for_each(|(t, d)| {
            for (t, &d) in t.iter_mut().zip(d) {
                let step = alpha * d;
                if step != A::zero() {
                    *t += step;
                }
            }
        });
}

/// Indices of NaN or infinite elements in an encoded little-endian buffer.
pub fn non_finite_indices(dtype: Dtype, bytes: &[u8]) -> impl Iterator<Item = usize> + '_ {
    let w = dtype.byte_width();
    bytes.chunks_exact(w).enumerate().filter_map(move |(i, c)| {
        let bad = match dtype {
            Dtype::F64 => {
                let m = 0x7ff0_0000_0000_0000u64;
                u64::from_le_bytes(c.try_into().unwrap()) & m == m
            }
            Dtype::F32 => {
                let m = 0x7f80_0000u32;
                u32::from_le_bytes(c.try_into().unwrap()) & m == m
            }
            Dtype::Bf16 => u16::from_le_bytes([c[0], c[1]]) & 0x7f80 == 0x7f80,
            Dtype::F16 => u16::from_le_bytes([c[0], c[1]]) & 0x7c00 == 0x7c00,
        };
        bad.then_some(i)
    })
}
