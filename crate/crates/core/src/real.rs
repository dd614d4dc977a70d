//! Scalar abstraction shared by plain `f64` evaluation and the gradient tape.
//!
//! Every numeric routine on the training path (spectral evaluation,
//! propagation, filtering, likelihood, network heads) is written once against
//! [`Real`] and instantiated either with `f64` for inference or with
//! [`crate::tape::Var`] when gradients are needed.

use core::fmt::Debug;
use core::ops::{Add, Div, Mul, Neg, Sub};

/// Largest magnitude accepted by `exp` before clamping.
pub const EXP_CLAMP: f64 = 700.0;

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Lift a constant. Constants carry no gradient.
    fn cst(v: f64) -> Self;
    /// Underlying value.
    fn val(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn softplus(self) -> Self;
    fn relu(self) -> Self;

    #[inline]
    fn zero() -> Self {
        Self::cst(0.0)
    }

    #[inline]
    fn one() -> Self {
        Self::cst(1.0)
    }

    #[inline]
    fn powi2(self) -> Self {
        self * self
    }

    #[inline]
    fn abs(self) -> Self {
        if self.val() < 0.0 {
            -self
        } else {
            self
        }
    }

    /// `exp` with its argument clamped to `±EXP_CLAMP`; the flag reports saturation.
    #[inline]
    fn exp_clamped(self) -> (Self, bool) {
        let v = self.val();
        if v > EXP_CLAMP {
            (Self::cst(EXP_CLAMP).exp(), true)
        } else if v < -EXP_CLAMP {
            (Self::cst(-EXP_CLAMP).exp(), true)
        } else {
            (self.exp(), false)
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus_f64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        libm::exp(x)
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Logistic function, the derivative of softplus.
#[inline]
pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Inverse of softplus for positive arguments.
#[inline]
pub fn inv_softplus_f64(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        libm::log(libm::expm1(y))
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        libm::log(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    #[inline]
    fn sin(self) -> Self {
        libm::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        libm::cos(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        libm::tanh(self)
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
    #[inline]
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
}
