//! Forward-mode jets: values with first and (optionally) second derivatives.
//!
//! `Dual<N>` carries a value and its gradient with respect to `N` seed
//! variables. `HessJet<N, M>` additionally carries the symmetric Hessian,
//! stored packed (upper triangle, row major), so `M` must equal
//! `N * (N + 1) / 2`; the two jet sizes used by the materials are aliased at
//! the crate root as e.g. [`crate::HessJet36`].
//!
//! Propagation rules follow the usual truncated Taylor arithmetic. For a
//! product `c = a * b`:
//!
//! ```text
//! c  = a b
//! ∇c = a ∇b + b ∇a
//! Hc = a Hb + b Ha + ∇a ∇bᵀ + ∇b ∇aᵀ
//! ```
//!
//! and for an elementary function `c = f(a)`:
//!
//! ```text
//! ∇c = f'(a) ∇a
//! Hc = f'(a) Ha + f''(a) ∇a ∇aᵀ
//! ```

use crate::scalar::Scalar;
use num_traits::{One, Zero};
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Index of `(a, b)` with `a <= b` in the packed upper triangle of an
/// `N x N` symmetric matrix.
#[inline]
pub fn packed_index<const N: usize>(a: usize, b: usize) -> usize {
    debug_assert!(a <= b && b < N);
    a * (2 * N - a + 1) / 2 + (b - a)
}

/// Packed length of the upper triangle for `N` variables.
pub const fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Value plus gradient with respect to `N` seed variables.
#[derive(Clone, Copy, Debug)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: f64) -> Self {
        Dual { v, g: [0.0; N] }
    }

    /// Seed variable `i` with value `v`.
    pub fn var(v: f64, i: usize) -> Self {
        let mut g = [0.0; N];
        g[i] = 1.0;
        Dual { v, g }
    }

    fn chain(self, f0: f64, f1: f64) -> Self {
        let mut g = [0.0; N];
        for i in 0..N {
            g[i] = f1 * self.g[i];
        }
        Dual { v: f0, g }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut g = self.g;
        for i in 0..N {
            g[i] += rhs.g[i];
        }
        Dual { v: self.v + rhs.v, g }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let mut g = self.g;
        for i in 0..N {
            g[i] -= rhs.g[i];
        }
        Dual { v: self.v - rhs.v, g }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut g = self.g;
        for v in g.iter_mut() {
            *v = -*v;
        }
        Dual { v: -self.v, g }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut g = [0.0; N];
        for i in 0..N {
            g[i] = self.g[i] * rhs.v + rhs.g[i] * self.v;
        }
        Dual { v: self.v * rhs.v, g }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        self * rhs.recip()
    }
}

impl<const N: usize> Zero for Dual<N> {
    fn zero() -> Self {
        Dual::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.v == 0.0 && self.g.iter().all(|x| *x == 0.0)
    }
}

impl<const N: usize> One for Dual<N> {
    fn one() -> Self {
        Dual::constant(1.0)
    }
}

impl<const N: usize> Scalar for Dual<N> {
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }

    fn val(&self) -> f64 {
        self.v
    }

    fn clamp_val(mut self, lo: f64, hi: f64) -> Self {
        self.v = self.v.clamp(lo, hi);
        self
    }

    fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r)
    }

    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }

    fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }

    fn tan(self) -> Self {
        let t = self.v.tan();
        self.chain(t, 1.0 + t * t)
    }

    fn acos(self) -> Self {
        self.chain(self.v.acos(), -1.0 / (1.0 - self.v * self.v).sqrt())
    }
}

/// Value, gradient and packed symmetric Hessian over `N` seed variables.
///
/// `M` must be `N * (N + 1) / 2`; this is asserted (debug) by the
/// constructors since stable const generics cannot express the relation.
#[derive(Clone, Copy, Debug)]
pub struct HessJet<const N: usize, const M: usize> {
    pub v: f64,
    pub g: [f64; N],
    pub h: [f64; M],
}

impl<const N: usize, const M: usize> HessJet<N, M> {
    pub fn constant(v: f64) -> Self {
        debug_assert_eq!(M, packed_len(N));
        HessJet { v, g: [0.0; N], h: [0.0; M] }
    }

    /// Seed variable `i` with value `v`.
    pub fn var(v: f64, i: usize) -> Self {
        let mut out = Self::constant(v);
        out.g[i] = 1.0;
        out
    }

    /// Hessian entry `(a, b)` in full (unpacked) indexing.
    #[inline]
    pub fn hess(&self, a: usize, b: usize) -> f64 {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.h[packed_index::<N>(a, b)]
    }

    fn chain(self, f0: f64, f1: f64, f2: f64) -> Self {
        let mut out = Self::constant(f0);
        for i in 0..N {
            out.g[i] = f1 * self.g[i];
        }
        let mut k = 0;
        for i in 0..N {
            let gi = self.g[i];
            for j in i..N {
                out.h[k] = f1 * self.h[k] + f2 * gi * self.g[j];
                k += 1;
            }
        }
        out
    }
}

impl<const N: usize, const M: usize> Add for HessJet<N, M> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut out = self;
        for i in 0..N {
            out.g[i] += rhs.g[i];
        }
        for k in 0..M {
            out.h[k] += rhs.h[k];
        }
        out.v += rhs.v;
        out
    }
}

impl<const N: usize, const M: usize> Sub for HessJet<N, M> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let mut out = self;
        for i in 0..N {
            out.g[i] -= rhs.g[i];
        }
        for k in 0..M {
            out.h[k] -= rhs.h[k];
        }
        out.v -= rhs.v;
        out
    }
}

impl<const N: usize, const M: usize> Neg for HessJet<N, M> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut out = self;
        out.v = -out.v;
        for v in out.g.iter_mut() {
            *v = -*v;
        }
        for v in out.h.iter_mut() {
            *v = -*v;
        }
        out
    }
}

impl<const N: usize, const M: usize> Mul for HessJet<N, M> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut out = Self::constant(self.v * rhs.v);
        for i in 0..N {
            out.g[i] = self.g[i] * rhs.v + rhs.g[i] * self.v;
        }
        let mut k = 0;
        for i in 0..N {
            let (sa, sb) = (self.g[i], rhs.g[i]);
            for j in i..N {
                out.h[k] = self.h[k] * rhs.v
                    + rhs.h[k] * self.v
                    + sa * rhs.g[j]
                    + sb * self.g[j];
                k += 1;
            }
        }
        out
    }
}

impl<const N: usize, const M: usize> Div for HessJet<N, M> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        self * rhs.recip()
    }
}

impl<const N: usize, const M: usize> Zero for HessJet<N, M> {
    fn zero() -> Self {
        Self::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.v == 0.0
            && self.g.iter().all(|x| *x == 0.0)
            && self.h.iter().all(|x| *x == 0.0)
    }
}

impl<const N: usize, const M: usize> One for HessJet<N, M> {
    fn one() -> Self {
        Self::constant(1.0)
    }
}

impl<const N: usize, const M: usize> Scalar for HessJet<N, M> {
    fn from_f64(x: f64) -> Self {
        Self::constant(x)
    }

    fn val(&self) -> f64 {
        self.v
    }

    fn clamp_val(mut self, lo: f64, hi: f64) -> Self {
        self.v = self.v.clamp(lo, hi);
        self
    }

    fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r, 2.0 * r * r * r)
    }

    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * s * s))
    }

    fn ln(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(self.v.ln(), r, -r * r)
    }

    fn tan(self) -> Self {
        let t = self.v.tan();
        let sec2 = 1.0 + t * t;
        self.chain(t, sec2, 2.0 * t * sec2)
    }

    fn acos(self) -> Self {
        let d = 1.0 - self.v * self.v;
        let s = d.sqrt();
        self.chain(self.v.acos(), -1.0 / s, -self.v / (s * d))
    }
}
