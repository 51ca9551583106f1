//! Numeric abstraction shared by the plain-f64 path and the autodiff tape.
//!
//! Every propagation formula, the IDM simulator and the forecasting head are
//! written once against [`Scalar`]. Instantiated with `f64` they evaluate
//! directly; instantiated with [`crate::autodiff::Var`] they record onto a
//! tape and become differentiable. This keeps the analytical path and the
//! differentiated path literally the same code.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Clone
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Numeric value at the current evaluation point.
    fn value(&self) -> f64;

    /// A constant `c` in the same computation context as `self`
    /// (same tape for tape variables; plain value for `f64`).
    fn lift(&self, c: f64) -> Self;

    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn tan(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn tanh(&self) -> Self;
    fn softplus(&self) -> Self;

    /// Clamp into `[lo, hi]`. Under differentiation the derivative is 1
    /// inside the interval (boundary included) and 0 outside.
    fn clamp_range(&self, lo: f64, hi: f64) -> Self;

    /// Multiplication by a constant (single tape node).
    fn scale(&self, c: f64) -> Self {
        self.clone() * self.lift(c)
    }

    /// Addition of a constant (single tape node).
    fn shift(&self, c: f64) -> Self {
        self.clone() + self.lift(c)
    }

    fn sq(&self) -> Self {
        self.clone() * self.clone()
    }
}

/// Numerically stable softplus for the plain path.
pub(crate) fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// d/dx softplus(x) = sigmoid(x).
pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }

    fn lift(&self, c: f64) -> Self {
        c
    }

    fn sin(&self) -> Self {
        f64::sin(*self)
    }

    fn cos(&self) -> Self {
        f64::cos(*self)
    }

    fn tan(&self) -> Self {
        f64::tan(*self)
    }

    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }

    fn exp(&self) -> Self {
        f64::exp(*self)
    }

    fn ln(&self) -> Self {
        f64::ln(*self)
    }

    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }

    fn softplus(&self) -> Self {
        softplus_f64(*self)
    }

    fn clamp_range(&self, lo: f64, hi: f64) -> Self {
        self.clamp(lo, hi)
    }

    fn scale(&self, c: f64) -> Self {
        self * c
    }

    fn shift(&self, c: f64) -> Self {
        self + c
    }
}
