//! Scalar abstraction so the whole stack can run in either `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar used throughout tensors, the autodiff tape, and the
/// model. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, for constants and RNG draws.
    fn of(x: f64) -> Self;

    /// Widening conversion to `f64`, for reporting and serialization.
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_halves<F: Real>(n: usize) -> F {
        (0..n).map(|_| F::of(0.5)).sum()
    }

    #[test]
    fn real_is_usable_generically_for_both_widths() {
        assert_eq!(sum_of_halves::<f32>(4), 2.0f32);
        assert_eq!(sum_of_halves::<f64>(4), 2.0f64);
    }

    #[test]
    fn conversions_round_trip_exact_values() {
        assert_eq!(<f32 as Real>::of(1.5).as_f64(), 1.5);
        assert_eq!(<f64 as Real>::of(-0.25).as_f64(), -0.25);
    }
}
