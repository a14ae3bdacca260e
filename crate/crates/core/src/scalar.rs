use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar the tabular machinery is generic over (`f32`, `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Tolerance used when validating that probability rows sum to one.
    const PROB_TOL: f64;
    /// Default tolerance for fixed-point and resolvent solves.
    const SOLVE_TOL: f64;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Real for f64 {
    const PROB_TOL: f64 = 1e-9;
    const SOLVE_TOL: f64 = 1e-10;
}

impl Real for f32 {
    const PROB_TOL: f64 = 1e-5;
    const SOLVE_TOL: f64 = 1e-5;
}
