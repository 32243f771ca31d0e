//! Scalar abstraction: everything numeric is generic over f32/f64.
//!
//! Training runs in f32; gradient checking runs in f64. The concrete
//! aliases live at the crate root (`Tensor32`, `Tensor64`).

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable everywhere in the engine.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from f64 (used for constants and RNG draws).
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }

    fn from_usizec(v: usize) -> Self {
        Self::from_usize(v).expect("usize conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
