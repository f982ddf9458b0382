//! Scalar abstraction so every kernel runs in both f32 (training) and f64
//! (verification) without duplication.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type of all tensors: f32 or f64.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64s(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64s(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64s(self) -> f64 {
        self
    }
}
