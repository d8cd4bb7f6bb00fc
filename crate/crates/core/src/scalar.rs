use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type for tensors, parameters and distances.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal or statistic; rounds for narrower types.
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to any float scalar")
    }

    fn widen(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("float scalars widen to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
