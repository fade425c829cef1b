//! Forward-mode dual numbers.
//!
//! `Dual<T, N>` carries a value and `N` directional derivatives. Nesting
//! (`Dual<Dual<f64, 3>, 4>`) yields mixed second derivatives, which is how the
//! seam deformation exposes both its spatial Jacobian and the parameter
//! sensitivities of that Jacobian.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar operations needed by the generic geometry code.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn re(&self) -> f64;
    fn exp(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;

    fn scale(self, s: f64) -> Self {
        self * Self::cst(s)
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(&self) -> f64 {
        *self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn scale(self, s: f64) -> Self {
        self * s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T, const N: usize> {
    pub v: T,
    pub d: [T; N],
}

impl<T: Real, const N: usize> Dual<T, N> {
    pub fn constant(v: T) -> Self {
        Self {
            v,
            d: [T::cst(0.0); N],
        }
    }

    /// A variable seeded along direction `i`.
    pub fn variable(v: T, i: usize) -> Self {
        let mut d = [T::cst(0.0); N];
        d[i] = T::cst(1.0);
        Self { v, d }
    }

    #[inline]
    fn chain(self, v: T, dv: T) -> Self {
        let mut d = self.d;
        for di in d.iter_mut() {
            *di = *di * dv;
        }
        Self { v, d }
    }
}

impl<T: Real, const N: usize> Add for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a = *a + b;
        }
        Self { v: self.v + o.v, d }
    }
}

impl<T: Real, const N: usize> Sub for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a = *a - b;
        }
        Self { v: self.v - o.v, d }
    }
}

impl<T: Real, const N: usize> Mul for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a = *a * o.v + self.v * b;
        }
        Self { v: self.v * o.v, d }
    }
}

impl<T: Real, const N: usize> Div for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = T::cst(1.0) / o.v;
        let v = self.v * inv;
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a = (*a - v * b) * inv;
        }
        Self { v, d }
    }
}

impl<T: Real, const N: usize> Neg for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut d = self.d;
        for a in d.iter_mut() {
            *a = -*a;
        }
        Self { v: -self.v, d }
    }
}

impl<T: Real, const N: usize> Real for Dual<T, N> {
    #[inline]
    fn cst(v: f64) -> Self {
        Self::constant(T::cst(v))
    }
    #[inline]
    fn re(&self) -> f64 {
        self.v.re()
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, T::cst(0.5) / s)
    }
    #[inline]
    fn scale(self, s: f64) -> Self {
        let mut d = self.d;
        for a in d.iter_mut() {
            *a = a.scale(s);
        }
        Self {
            v: self.v.scale(s),
            d,
        }
    }
}

/// Small fixed-size vector helpers over any [`Real`].
pub mod v3 {
    use super::Real;

    pub fn cst<T: Real>(a: [f64; 3]) -> [T; 3] {
        [T::cst(a[0]), T::cst(a[1]), T::cst(a[2])]
    }
    pub fn add<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }
    pub fn sub<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }
    pub fn mul<T: Real>(a: [T; 3], s: T) -> [T; 3] {
        [a[0] * s, a[1] * s, a[2] * s]
    }
    pub fn dot<T: Real>(a: [T; 3], b: [T; 3]) -> T {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }
    pub fn cross<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }
}
