//! Scalar abstraction for the cost model, closed forms, calibration and
//! metric reduction. The simulator itself runs on `f64`.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fmt::{Debug, Display};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Serialize + DeserializeOwned + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn of_usize(v: usize) -> Self {
        Self::lit(v as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
