//! Scalar abstraction shared by plain `f64` evaluation and forward-mode jets.
//!
//! Strain energies are written once, generically over [`Scalar`]. Evaluating
//! them with `f64` gives the energy density; evaluating them with the jet
//! types from [`crate::dual`] gives first and second derivatives with respect
//! to the deformation measures, exactly to floating-point roundoff.

use num_traits::{One, Zero};
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic and the elementary functions the material models need.
///
/// All operations take `self` by value; implementors are `Copy` plain-old
/// data. `val` exposes the zeroth-order (value) part so that generic code
/// can branch on the underlying number without touching derivative data.
pub trait Scalar:
    Copy
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;

    /// Value part; for jets, the coefficient of order zero.
    fn val(&self) -> f64;

    /// Clamp the value part into `[lo, hi]`, leaving derivative data alone.
    /// Used to absorb roundoff drift before domain-restricted functions.
    fn clamp_val(self, lo: f64, hi: f64) -> Self;

    fn recip(self) -> Self;
    fn sqrt(self) -> Self;
    fn ln(self) -> Self;
    fn tan(self) -> Self;
    fn acos(self) -> Self;

    /// Integer power by repeated multiplication; `n` may be negative.
    fn powi(self, n: i32) -> Self {
        if n < 0 {
            return self.recip().powi(-n);
        }
        let mut out = Self::one();
        let mut base = self;
        let mut e = n as u32;
        while e > 0 {
            if e & 1 == 1 {
                out = out * base;
            }
            base = base * base;
            e >>= 1;
        }
        out
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn val(&self) -> f64 {
        *self
    }

    #[inline]
    fn clamp_val(self, lo: f64, hi: f64) -> Self {
        self.clamp(lo, hi)
    }

    #[inline]
    fn recip(self) -> Self {
        f64::recip(self)
    }

    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }

    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }

    #[inline]
    fn tan(self) -> Self {
        f64::tan(self)
    }

    #[inline]
    fn acos(self) -> Self {
        f64::acos(self)
    }
}
