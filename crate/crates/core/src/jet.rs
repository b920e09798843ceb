//! Forward-mode dual numbers with a fixed seed dimension.
//!
//! A [`Jet<N>`] carries a value and its gradient against `N` seed directions.
//! Model functions are written against [`AdScalar`] so the same expression
//! evaluates plain numbers or propagates exact first derivatives.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar interface shared by `f64` and [`Jet`].
pub trait AdScalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(c: f64) -> Self;
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn atan(self) -> Self;
}

impl AdScalar for f64 {
    fn constant(c: f64) -> Self {
        c
    }
    fn value(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
}

/// Value plus gradient. The seed dimension is part of the type, so mixing
/// gradient lengths inside one expression is a compile error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<const N: usize> {
    pub val: f64,
    pub grad: [f64; N],
}

impl<const N: usize> Jet<N> {
    pub fn constant(val: f64) -> Self {
        Jet {
            val,
            grad: [0.0; N],
        }
    }

    /// Variable seeded against direction `dir`.
    pub fn seeded(val: f64, dir: usize) -> Self {
        let mut grad = [0.0; N];
        grad[dir] = 1.0;
        Jet { val, grad }
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut grad = self.grad;
        for (g, r) in grad.iter_mut().zip(rhs.grad.iter()) {
            *g += r;
        }
        Jet {
            val: self.val + rhs.val,
            grad,
        }
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let mut grad = self.grad;
        for (g, r) in grad.iter_mut().zip(rhs.grad.iter()) {
            *g -= r;
        }
        Jet {
            val: self.val - rhs.val,
            grad,
        }
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut grad = [0.0; N];
        for i in 0..N {
            grad[i] = self.grad[i] * rhs.val + self.val * rhs.grad[i];
        }
        Jet {
            val: self.val * rhs.val,
            grad,
        }
    }
}

impl<const N: usize> Div for Jet<N> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.val;
        let val = self.val * inv;
        let mut grad = [0.0; N];
        for i in 0..N {
            grad[i] = (self.grad[i] - val * rhs.grad[i]) * inv;
        }
        Jet { val, grad }
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut grad = self.grad;
        for g in grad.iter_mut() {
            *g = -*g;
        }
        Jet {
            val: -self.val,
            grad,
        }
    }
}

impl<const N: usize> AdScalar for Jet<N> {
    fn constant(c: f64) -> Self {
        Jet::constant(c)
    }

    fn value(self) -> f64 {
        self.val
    }

    fn sin(self) -> Self {
        let (s, c) = self.val.sin_cos();
        let mut grad = self.grad;
        for g in grad.iter_mut() {
            *g *= c;
        }
        Jet { val: s, grad }
    }

    fn cos(self) -> Self {
        let (s, c) = self.val.sin_cos();
        let mut grad = self.grad;
        for g in grad.iter_mut() {
            *g *= -s;
        }
        Jet { val: c, grad }
    }

    fn atan(self) -> Self {
        let d = 1.0 / (1.0 + self.val * self.val);
        let mut grad = self.grad;
        for g in grad.iter_mut() {
            *g *= d;
        }
        Jet {
            val: self.val.atan(),
            grad,
        }
    }
}
