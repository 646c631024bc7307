//! Scalar abstraction shared by the controller, trainer and reward code.

use std::fmt::{Debug, Display};
use num_traits::{Float, FromPrimitive, NumAssign};

/// Real scalar the numeric core is generic over (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Debug + Display + Send + Sync + 'static
{
    /// Converts a literal; every `f64` is representable (possibly rounded) in the
    /// supported types.
    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal must convert")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar must convert to f64")
    }
}

/// Sums an iterator of scalars in order.
pub fn sum<T: Scalar>(iter: impl IntoIterator<Item = T>) -> T {
    iter.into_iter().fold(T::zero(), |acc, v| acc + v)
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// IEEE binary128 (via libquadmath), used as a high-precision reference when
/// checking derivatives.
impl Scalar for f128::f128 {}

/// Numerically stable softmax of `logits` into `out`.
pub fn softmax_into<T: Scalar>(logits: &[T], out: &mut Vec<T>) {
    out.clear();
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for &l in logits {
        let e = (l - max).exp();
        total += e;
        out.push(e);
    }
    for p in out.iter_mut() {
        *p /= total;
    }
}

/// `log softmax(logits)[index]` computed without forming the distribution.
pub fn log_softmax_at<T: Scalar>(logits: &[T], index: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = sum(logits.iter().map(|&l| (l - max).exp())).ln() + max;
    logits[index] - lse
}
