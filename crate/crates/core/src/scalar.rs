//! Scalar abstraction for the numeric core.
//!
//! All reward math (Bradley-Terry probabilities, likelihoods, gradients,
//! simplex projection, rank correlations) is generic over [`Scalar`], so the
//! same code runs in `f32` or `f64`. Every type in this crate defaults its
//! scalar parameter to `f64`, which is what the artifact formats and the CLI
//! use; see the aliases at the crate root for the `f32` lane.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar usable throughout the numeric core: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into this scalar type.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("constant not representable in scalar type")
    }

    /// Converts to `f64` for reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
