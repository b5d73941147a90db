//! Scalar abstraction: the numeric core is generic over f32/f64.
//!
//! f32 is the training/runtime default; f64 is used by gradient checks and
//! geometry oracles where finite-difference comparisons need the headroom.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element dtype tag used by the tensor archive format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    I64,
    U8,
    Str,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::I64 => 2,
            Dtype::U8 => 3,
            Dtype::Str => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Dtype::F32,
            1 => Dtype::F64,
            2 => Dtype::I64,
            3 => Dtype::U8,
            4 => Dtype::Str,
            _ => return None,
        })
    }
}

/// Floating-point scalar for all model math: f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn of_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn of_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64_(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn of_f64(x: f64) -> Self {
        x
    }

    fn to_f64_(self) -> f64 {
        self
    }
}

/// Shorthand for lifting an f64 literal into the generic scalar type.
#[inline]
pub fn s<S: Scalar>(x: f64) -> S {
    S::of_f64(x)
}
