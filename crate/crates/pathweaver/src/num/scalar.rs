//! Element type abstraction: everything numeric is generic over [`Scalar`]
//! so the same model code runs in f32 (training speed) or f64 (gradient
//! verification, where finite differences actually resolve).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from f64; named to avoid shadowing
    /// `FromPrimitive::from_f64`.
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion to f64.
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
