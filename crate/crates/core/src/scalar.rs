//! Floating-point storage types usable for network parameters.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Storage scalar for tensors and parameters.
///
/// Reductions (dot products, loss sums, gradient accumulation) always run in
/// `f64` regardless of the storage type; `to_acc`/`from_acc` are the
/// conversion points into and out of that accumulator.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Bits per stored value, used for checkpoint bookkeeping and reporting.
    const BITS: u32;

    fn to_acc(self) -> f64;

    fn from_acc(x: f64) -> Self;
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    #[inline(always)]
    fn to_acc(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn from_acc(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    #[inline(always)]
    fn to_acc(self) -> f64 {
        self
    }

    #[inline(always)]
    fn from_acc(x: f64) -> Self {
        x
    }
}

/// Euclidean norm with `f64` accumulation.
pub fn norm2<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.to_acc() * x.to_acc()).sum::<f64>().sqrt()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_acc() * y.to_acc()).sum()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn max_abs<T: Scalar>(v: &[T]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.to_acc().abs()))
}

pub fn sum_acc<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.to_acc()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_of_opposite_vectors() {
        let a = [1.0f64, 2.0, -3.0];
        let b = [-1.0f64, -2.0, 3.0];
        assert!((cosine(&a, &b) + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&a, &[0.0; 3]), 0.0);
    }

    #[test]
    fn f32_accumulates_in_f64() {
        let v = vec![0.1f32; 1_000_000];
        let s = sum_acc(&v);
        assert!((s - 100_000.0).abs() < 1e-1);
    }
}
