//! Floating-point scalar abstraction.
//!
//! Every numeric module in this crate is generic over [`Scalar`] so the same
//! code runs the production pipeline at `f32` and the verification paths
//! (finite-difference gradient checks, solver diagnostics) at `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar used throughout the toolkit.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Sum<Self>
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn to_f64(self) -> f64;
    fn to_f32(self) -> f32;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}
