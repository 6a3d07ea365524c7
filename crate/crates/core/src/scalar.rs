//! Floating-point scalar abstraction.
//!
//! Every numeric routine in the crate is written against [`Scalar`] so the same
//! model code runs in single precision for training and double precision for
//! gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rustfft::FftNum;

/// Real scalar usable by tensors, tapes and models: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + FftNum + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Width tag written into run metadata.
    const NAME: &'static str;

    /// Lossy conversion from `f64`; used for constants and hyperparameters.
    fn of(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Numeric precision selected at run time (config / CLI flag).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(crate::Error::usage(format!("unknown precision `{other}` (expected f32 or f64)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}
