use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar used throughout the crate: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumCast + Default + Debug + Display + Sum + Send + Sync + Serialize + DeserializeOwned + 'static
{
    /// Converts an `f64` literal into this scalar type.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
