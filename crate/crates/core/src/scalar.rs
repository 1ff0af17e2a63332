//! Scalar abstraction: the whole math stack is generic over `Real`,
//! instantiated as f32 (training) or f64 (tight-tolerance test mode).

use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + Sum
    + Display
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Central-difference step for gradient checks: 1e-3 in f32, 1e-5 in f64.
    const GRAD_CHECK_STEP: Self;

    fn of_f64(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("f64 literal representable in Real")
    }

    fn of_usize(v: usize) -> Self {
        num_traits::FromPrimitive::from_usize(v).expect("usize representable in Real")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Real representable in f64")
    }

    fn as_f32(self) -> f32 {
        num_traits::ToPrimitive::to_f32(&self).expect("Real representable in f32")
    }
}

impl Real for f32 {
    const GRAD_CHECK_STEP: f32 = 1e-3;
}

impl Real for f64 {
    const GRAD_CHECK_STEP: f64 = 1e-5;
}
