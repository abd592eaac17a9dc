//! Scalar abstraction so the same layer code runs in f32 (storage precision)
//! and f64 (oracle / gradient-check precision).

use num_traits::Float;

pub trait Scalar:
    Float + std::ops::AddAssign + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64_(self) -> f64 {
        self
    }
}
