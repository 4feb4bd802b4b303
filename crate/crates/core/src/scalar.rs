//! Floating-point scalar abstraction used by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type the tensor engine and models are generic over.
pub trait Scalar:
    Float
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
    /// Lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn as_f32(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }

    fn of_f32(x: f32) -> Self {
        Self::of(x as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
