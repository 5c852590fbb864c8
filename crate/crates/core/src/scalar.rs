//! Floating-point abstraction so every operator runs in single or double precision.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use twofloat::TwoFloat;

/// Numeric precision of a computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(format!("unknown precision `{other}` (expected single|double)")),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

/// Scalar type used throughout the crate. Implemented for `f32`, `f64`, and the
/// double-double [`TwoFloat`] used as a finite-difference reference.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    const PRECISION: Precision;

    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `e^x`. Overridden where the `Float` method is less accurate than the type.
    #[inline]
    fn real_exp(self) -> Self {
        self.exp()
    }

    #[inline]
    fn real_tanh(self) -> Self {
        self.tanh()
    }

    #[inline]
    fn real_div(self, rhs: Self) -> Self {
        self / rhs
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Reports as double: it is only ever used as a more accurate double.
impl Real for TwoFloat {
    const PRECISION: Precision = Precision::Double;

    #[inline]
    fn lit(x: f64) -> Self {
        TwoFloat::from(x)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.hi() + self.lo()
    }

    /// `TwoFloat::exp` is only accurate to double precision.
    fn real_exp(self) -> Self {
        if self.hi() > 709.0 {
            return TwoFloat::from(f64::INFINITY);
        }
        if self.hi() < -745.0 {
            return TwoFloat::from(0.0);
        }
        // x = k ln2 + r, |r| <= ln2/2; e^r = (e^(r/1024))^1024
        let k = (self.hi() / std::f64::consts::LN_2).round();
        let r = (self - twofloat::consts::LN_2 * k) / 1024.0;
        let mut term = TwoFloat::from(1.0);
        let mut sum = TwoFloat::from(1.0);
        for n in 1..=10 {
            term = term * r / n as f64;
            sum += term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum * 2f64.powi(k as i32)
    }

    /// Twofloat's own quotient of two double-doubles is only double-accurate.
    fn real_div(self, rhs: Self) -> Self {
        let one = TwoFloat::from(1.0);
        let mut r = TwoFloat::from(1.0 / rhs.hi());
        for _ in 0..2 {
            r = r + r * (one - rhs * r);
        }
        self * r
    }

    fn real_tanh(self) -> Self {
        let a = self.abs();
        let e = (a * -2.0).real_exp();
        let t = (TwoFloat::from(1.0) - e).real_div(TwoFloat::from(1.0) + e);
        if self.hi() < 0.0 {
            -t
        } else {
            t
        }
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
