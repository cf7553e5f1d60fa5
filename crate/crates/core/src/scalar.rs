//! Scalar abstraction shared by every numeric module.
//!
//! Training and gradient checks run in `f64`; everything that feeds the
//! arithmetic coder (quantization steps, entropy parameters, CDF tables) runs
//! in `f32` so that encoder and decoder agree bit for bit.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the codec: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
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
    fn erf(self) -> Self;
    fn erfc(self) -> Self;

    /// Lossy conversion from an `f64` literal or value.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite float")
    }

    #[inline]
    fn cast<U: Real>(self) -> U {
        U::lit(self.as_f64())
    }

    /// Standard normal CDF.
    #[inline]
    fn normal_cdf(self) -> Self {
        Self::lit(0.5) * (-self / Self::SQRT_2()).erfc()
    }

    #[inline]
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    /// `ln(1 + e^x)` without overflow.
    #[inline]
    fn softplus(self) -> Self {
        if self > Self::lit(30.0) {
            self
        } else {
            self.exp().ln_1p()
        }
    }

    /// Round half to even.
    fn round_ties_even(self) -> Self;
}

impl Real for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    #[inline]
    fn erfc(self) -> Self {
        libm::erfcf(self)
    }
    #[inline]
    fn round_ties_even(self) -> Self {
        f32::round_ties_even(self)
    }
}

impl Real for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    #[inline]
    fn erfc(self) -> Self {
        libm::erfc(self)
    }
    #[inline]
    fn round_ties_even(self) -> Self {
        f64::round_ties_even(self)
    }
}

/// Converts a slice between scalar types.
pub fn cast_vec<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| x.cast()).collect()
}

pub fn cast_arr<T: Real, U: Real, const N: usize>(v: &[T; N]) -> [U; N] {
    std::array::from_fn(|i| v[i].cast())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_symmetry() {
        for x in [-3.0f64, -1.0, 0.0, 0.5, 2.0] {
            let s = x.normal_cdf() + (-x).normal_cdf();
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert!((0.0f32.normal_cdf() - 0.5).abs() < 1e-7);
    }

    #[test]
    fn round_half_even() {
        assert_eq!(Real::round_ties_even(2.5f64), 2.0);
        assert_eq!(Real::round_ties_even(-2.5f64), -2.0);
        assert_eq!(Real::round_ties_even(1.4f32), 1.0);
        assert_eq!(Real::round_ties_even(-2.6f64), -3.0);
    }

    #[test]
    fn softplus_and_sigmoid_ranges() {
        assert!((0.0f64.sigmoid() - 0.5).abs() < 1e-15);
        assert!((0.0f64.softplus() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((-800.0f64).sigmoid() >= 0.0);
        assert_eq!(100.0f64.softplus(), 100.0);
    }
}
