use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for the numeric core. Implemented for `f32`
/// and `f64`; experiments use `f64` throughout.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Sum + Send + Sync + 'static
{
    fn from_f64_exact(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }

    fn to_f64_exact(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting literals into the active scalar type.
pub fn s<S: Scalar>(x: f64) -> S {
    S::from_f64_exact(x)
}
