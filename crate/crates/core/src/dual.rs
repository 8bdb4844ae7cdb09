//! Scalar abstraction used by the network executor.
//!
//! The executor is written once over [`Real`] and instantiated with `f64` for
//! ordinary passes and with [`Dual`] for forward-over-reverse products: running
//! the backward pass at `theta + eps * r` with dual parameters yields, in the
//! `eps` part of the input gradient, the exact vector-Jacobian product
//! `J_x(grad_theta L)^T r`. Step III and the gradient-matching baselines rely on
//! this to differentiate a gradient distance with respect to the fake inputs.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(v: f64) -> Self;
    /// The primal value, used for branch decisions (ReLU, stable sigmoid, max).
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn scale(self, s: f64) -> Self {
        self * Self::from_f64(s)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn scale(self, s: f64) -> Self {
        self * s
    }
}

/// First-order dual number `re + eps * e` with `e^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.re;
        Dual::new(self.re * inv, (self.eps * o.re - self.re * o.eps) * inv * inv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.eps += o.eps;
    }
}

impl SubAssign for Dual {
    fn sub_assign(&mut self, o: Dual) {
        self.re -= o.re;
        self.eps -= o.eps;
    }
}

impl MulAssign for Dual {
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl Real for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn value(self) -> f64 {
        self.re
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.eps * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
    fn scale(self, s: f64) -> Self {
        Dual::new(self.re * s, self.eps * s)
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x.value() >= 0.0 {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax of one logit row.
pub(crate) fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let m = z.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
    let shift = T::from_f64(m);
    let e: Vec<T> = z.iter().map(|&v| (v - shift).exp()).collect();
    let mut s = T::zero();
    for &v in &e {
        s += v;
    }
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<T: Real>(x: T) -> T {
        sigmoid(x * x).ln() + x.exp() / (T::one() + x)
    }

    #[test]
    fn dual_derivative_matches_central_difference() {
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.1] {
            let d = f(Dual::new(x, 1.0)).eps;
            let h = 1e-6;
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            assert!((d - fd).abs() < 1e-7, "x={x} dual={d} fd={fd}");
        }
    }

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
