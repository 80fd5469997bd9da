//! Floating-point scalar abstraction so the numerical core can run in f32
//! (fast training) or f64 (finite-difference gradient checks).

use num_traits::Float;

/// Scalar type accepted by the tensor and model code: f32 or f64.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64s(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64s(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64s(self) -> f64 {
        self
    }
}
