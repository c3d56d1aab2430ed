//! Element types the kernels are generic over.
//!
//! Storage is `f32` for training; `f64` models exist so finite-difference
//! gradient checks have enough precision to be meaningful. Every reduction
//! widens to `f64`, accumulates there, and narrows once at the end.

use std::fmt::{Debug, Display};

pub trait Scalar:
    num_traits::Float + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossless conversion into the accumulator type.
    fn widen(self) -> f64;
    /// Round an accumulator value back into storage precision.
    fn narrow(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }

    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v
    }
}
