//! Floating point abstraction shared by the numeric modules.
//!
//! Everything that does arithmetic on embeddings, logits or rewards is written
//! against [`Scalar`] so it can run in `f32` or `f64`. File formats and the
//! pipeline always store `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + Sum
    + for<'a> Sum<&'a Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lift an `f64` constant into this scalar type.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable in scalar type")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero vectors have cosine 0 with everything.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let na = norm(a);
    let nb = norm(b);
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    let c = dot(a, b) / (na * nb);
    c.max(-T::one()).min(T::one())
}

/// Normalize in place. Returns `false` (leaving the vector untouched) when it has zero norm.
pub fn normalize_in_place<T: Scalar>(a: &mut [T]) -> bool {
    let n = norm(a);
    if n == T::zero() || !n.is_finite() {
        return false;
    }
    for x in a.iter_mut() {
        *x /= n;
    }
    true
}

/// `log Σ exp(x_i)` with max-shift stabilization. Empty input gives `-inf`.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Log-softmax of a logit vector.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&x| x - lse).collect()
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    log_softmax(logits).into_iter().map(Float::exp).collect()
}

/// Numerically stable `log σ(x)`.
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean of a slice; `None` when empty.
pub fn mean<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().copied().sum::<T>() / T::of_usize(xs.len()))
    }
}

/// Inverse-CDF draw: the first index whose cumulative probability exceeds
/// `u ∈ [0, 1)`. Rounding slack at the top falls to the last positive entry.
pub fn inverse_cdf<T: Scalar>(probs: &[T], u: T) -> usize {
    let mut acc = T::zero();
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > T::zero()).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sigmoid_is_stable_at_extremes() {
        assert!((log_sigmoid(0.0f64) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(800.0f64).abs() < 1e-300);
        assert!((log_sigmoid(-800.0f64) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(-800.0f32).is_finite());
    }

    #[test]
    fn softmax_sums_to_one_for_both_widths() {
        let p64 = softmax(&[1000.0f64, 999.0, -5.0]);
        assert!((p64.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p32 = softmax(&[10.0f32, 9.0, -5.0]);
        assert!((p32.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        assert_eq!(cosine(&[0.0f64, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[3.0f64, 4.0], &[6.0, 8.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn inverse_cdf_picks_bucket() {
        let p = [0.25f64, 0.5, 0.25];
        assert_eq!(inverse_cdf(&p, 0.0), 0);
        assert_eq!(inverse_cdf(&p, 0.25), 1);
        assert_eq!(inverse_cdf(&p, 0.74), 1);
        assert_eq!(inverse_cdf(&p, 0.99), 2);
        assert_eq!(inverse_cdf(&[0.5f64, 0.5 - 1e-17, 0.0], 0.9999999999999999), 1);
    }
}
