//! Numeric traits the engines are generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, Neg};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Float, Num, PrimInt, Signed, ToPrimitive};

/// Floating-point element of a feature map or kernel.
pub trait Scalar:
    Float + AddAssign + MulAssign + Sum + Send + Sync + Debug + Display + Default + 'static
{
    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Signed fixed-point raw storage with its accumulator width.
pub trait Fixed: PrimInt + Signed + Send + Sync + Debug + Default + 'static {
    /// Wide accumulator used for products of two raw values.
    type Acc: PrimInt + Signed + AddAssign + Send + Sync + Debug;

    const BITS: u32;

    fn widen(self) -> Self::Acc;

    fn acc_from_i64(v: i64) -> Self::Acc;

    fn acc_to_i64(v: Self::Acc) -> i64;

    /// Saturating narrow from an already-rounded integer.
    fn saturate(v: i128) -> Self;

    fn max_raw() -> i64 {
        (1i64 << (Self::BITS - 1)) - 1
    }
}

impl Fixed for i16 {
    type Acc = i64;
    const BITS: u32 = 16;

    fn widen(self) -> i64 {
        self as i64
    }

    fn acc_from_i64(v: i64) -> i64 {
        v
    }

    fn acc_to_i64(v: i64) -> i64 {
        v
    }

    fn saturate(v: i128) -> Self {
        v.clamp(i16::MIN as i128, i16::MAX as i128) as i16
    }
}

impl Fixed for i8 {
    type Acc = i32;
    const BITS: u32 = 8;

    fn widen(self) -> i32 {
        self as i32
    }

    fn acc_from_i64(v: i64) -> i32 {
        v.clamp(i32::MIN as i64, i32::MAX as i64) as i32
    }

    fn acc_to_i64(v: i32) -> i64 {
        v as i64
    }

    fn saturate(v: i128) -> Self {
        v.clamp(i8::MIN as i128, i8::MAX as i128) as i8
    }
}

/// Exact field arithmetic, enough to build interpolation matrices.
pub trait Field: Clone + Num + Neg<Output = Self> + PartialOrd + Debug {
    fn from_i64(v: i64) -> Self;

    fn to_f64(&self) -> f64;
}

impl Field for BigRational {
    fn from_i64(v: i64) -> Self {
        BigRational::from_integer(BigInt::from(v))
    }

    fn to_f64(&self) -> f64 {
        // numerators and denominators of transform entries stay far below 2^53
        self.numer().to_f64().unwrap_or(f64::NAN) / self.denom().to_f64().unwrap_or(f64::NAN)
    }
}

impl Field for f64 {
    fn from_i64(v: i64) -> Self {
        v as f64
    }

    fn to_f64(&self) -> f64 {
        *self
    }
}
