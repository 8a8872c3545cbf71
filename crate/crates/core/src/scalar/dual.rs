//! First-order forward-mode dual numbers `re + eps·ε`, `ε² = 0`.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use super::Real;

/// Dual number carrying a primal value and one directional derivative.
///
/// Comparisons look only at the primal part, so piecewise operations
/// (relu masks, clamps) branch exactly as their primal counterparts do.
#[derive(Clone, Copy, Default)]
pub struct Dual<T> {
    pub re: T,
    pub eps: T,
}

impl<T: Real> Dual<T> {
    pub fn new(re: T, eps: T) -> Self {
        Self { re, eps }
    }

    pub fn constant(re: T) -> Self {
        Self { re, eps: T::zero() }
    }

    #[inline]
    fn chain(self, f: T, df: T) -> Self {
        Self { re: f, eps: self.eps * df }
    }
}

impl<T: Real> fmt::Debug for Dual<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}+{:?}ε", self.re, self.eps)
    }
}

impl<T: Real> fmt::Display for Dual<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}ε", self.re, self.eps)
    }
}

impl<T: Real> PartialEq for Dual<T> {
    fn eq(&self, other: &Self) -> bool {
        self.re == other.re
    }
}

impl<T: Real> PartialOrd for Dual<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self { re: self.re + o.re, eps: self.eps + o.eps }
    }
}

impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self { re: self.re - o.re, eps: self.eps - o.eps }
    }
}

impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self { re: self.re * o.re, eps: self.eps * o.re + self.re * o.eps }
    }
}

impl<T: Real> Div for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = T::one() / o.re;
        Self { re: self.re * inv, eps: (self.eps * o.re - self.re * o.eps) * inv * inv }
    }
}

impl<T: Real> Rem for Dual<T> {
    type Output = Self;
    fn rem(self, o: Self) -> Self {
        // a - trunc(a/b)·b, trunc is locally constant
        let q = (self.re / o.re).trunc();
        Self { re: self.re % o.re, eps: self.eps - q * o.eps }
    }
}

impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self { re: -self.re, eps: -self.eps }
    }
}

macro_rules! assign_op {
    ($tr:ident, $m:ident, $op:tt) => {
        impl<T: Real> $tr for Dual<T> {
            #[inline]
            fn $m(&mut self, o: Self) {
                *self = *self $op o;
            }
        }
    };
}
assign_op!(AddAssign, add_assign, +);
assign_op!(SubAssign, sub_assign, -);
assign_op!(MulAssign, mul_assign, *);
assign_op!(DivAssign, div_assign, /);
assign_op!(RemAssign, rem_assign, %);

impl<T: Real> Zero for Dual<T> {
    fn zero() -> Self {
        Self::constant(T::zero())
    }
    fn is_zero(&self) -> bool {
        self.re.is_zero() && self.eps.is_zero()
    }
}

impl<T: Real> One for Dual<T> {
    fn one() -> Self {
        Self::constant(T::one())
    }
}

impl<T: Real> Num for Dual<T> {
    type FromStrRadixErr = T::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        T::from_str_radix(s, radix).map(Self::constant)
    }
}

impl<T: Real> ToPrimitive for Dual<T> {
    fn to_i64(&self) -> Option<i64> {
        self.re.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.re.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        self.re.to_f64()
    }
}

impl<T: Real> NumCast for Dual<T> {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        <T as NumCast>::from(n).map(Self::constant)
    }
}

impl<T: Real> FromPrimitive for Dual<T> {
    fn from_i64(n: i64) -> Option<Self> {
        T::from_i64(n).map(Self::constant)
    }
    fn from_u64(n: u64) -> Option<Self> {
        T::from_u64(n).map(Self::constant)
    }
    fn from_f64(n: f64) -> Option<Self> {
        T::from_f64(n).map(Self::constant)
    }
}

impl<T: Real> Sum for Dual<T> {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), |a, b| a + b)
    }
}

impl<T: Real> Float for Dual<T> {
    fn nan() -> Self {
        Self::constant(T::nan())
    }
    fn infinity() -> Self {
        Self::constant(T::infinity())
    }
    fn neg_infinity() -> Self {
        Self::constant(T::neg_infinity())
    }
    fn neg_zero() -> Self {
        Self::constant(T::neg_zero())
    }
    fn min_value() -> Self {
        Self::constant(T::min_value())
    }
    fn min_positive_value() -> Self {
        Self::constant(T::min_positive_value())
    }
    fn epsilon() -> Self {
        Self::constant(T::epsilon())
    }
    fn max_value() -> Self {
        Self::constant(T::max_value())
    }
    fn is_nan(self) -> bool {
        self.re.is_nan() || self.eps.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.re.is_infinite() || self.eps.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.eps.is_finite()
    }
    fn is_normal(self) -> bool {
        self.re.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.re.classify()
    }
    fn floor(self) -> Self {
        Self::constant(self.re.floor())
    }
    fn ceil(self) -> Self {
        Self::constant(self.re.ceil())
    }
    fn round(self) -> Self {
        Self::constant(self.re.round())
    }
    fn trunc(self) -> Self {
        Self::constant(self.re.trunc())
    }
    fn fract(self) -> Self {
        Self { re: self.re.fract(), eps: self.eps }
    }
    fn abs(self) -> Self {
        if self.re < T::zero() {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Self::constant(self.re.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.re.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.re.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        let r = self.re.recip();
        self.chain(r, -r * r)
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::one();
        }
        let p = self.re.powi(n - 1);
        self.chain(p * self.re, T::from_i32(n).unwrap() * p)
    }
    fn powf(self, n: Self) -> Self {
        // d(a^b) = a^b (b' ln a + b a'/a)
        let v = self.re.powf(n.re);
        let mut eps = T::zero();
        if !self.eps.is_zero() {
            eps += n.re * self.re.powf(n.re - T::one()) * self.eps;
        }
        if !n.eps.is_zero() {
            eps += v * self.re.ln() * n.eps;
        }
        Self { re: v, eps }
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, T::lit(0.5) / s)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn exp2(self) -> Self {
        let e = self.re.exp2();
        self.chain(e, e * T::lit(std::f64::consts::LN_2))
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), self.re.recip())
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.chain(self.re.log2(), (self.re * T::lit(std::f64::consts::LN_2)).recip())
    }
    fn log10(self) -> Self {
        self.chain(self.re.log10(), (self.re * T::lit(std::f64::consts::LN_10)).recip())
    }
    fn max(self, other: Self) -> Self {
        if other.re > self.re || self.re.is_nan() {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if other.re < self.re || self.re.is_nan() {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self.re > other.re {
            self - other
        } else {
            Self::zero()
        }
    }
    fn cbrt(self) -> Self {
        let c = self.re.cbrt();
        self.chain(c, (T::lit(3.0) * c * c).recip())
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    fn tan(self) -> Self {
        let t = self.re.tan();
        self.chain(t, T::one() + t * t)
    }
    fn asin(self) -> Self {
        self.chain(self.re.asin(), (T::one() - self.re * self.re).sqrt().recip())
    }
    fn acos(self) -> Self {
        self.chain(self.re.acos(), -(T::one() - self.re * self.re).sqrt().recip())
    }
    fn atan(self) -> Self {
        self.chain(self.re.atan(), (T::one() + self.re * self.re).recip())
    }
    fn atan2(self, other: Self) -> Self {
        let d = self.re * self.re + other.re * other.re;
        Self {
            re: self.re.atan2(other.re),
            eps: (other.re * self.eps - self.re * other.eps) / d,
        }
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.chain(self.re.exp_m1(), self.re.exp())
    }
    fn ln_1p(self) -> Self {
        self.chain(self.re.ln_1p(), (T::one() + self.re).recip())
    }
    fn sinh(self) -> Self {
        self.chain(self.re.sinh(), self.re.cosh())
    }
    fn cosh(self) -> Self {
        self.chain(self.re.cosh(), self.re.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, T::one() - t * t)
    }
    fn asinh(self) -> Self {
        self.chain(self.re.asinh(), (self.re * self.re + T::one()).sqrt().recip())
    }
    fn acosh(self) -> Self {
        self.chain(self.re.acosh(), (self.re * self.re - T::one()).sqrt().recip())
    }
    fn atanh(self) -> Self {
        self.chain(self.re.atanh(), (T::one() - self.re * self.re).recip())
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.re.integer_decode()
    }
}

impl<T: Real> Real for Dual<T> {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    ) {
        // (A + εA')(B + εB') = AB + ε(A'B + AB'); three primal products.
        assert!(alpha.eps.is_zero() && beta.eps.is_zero(), "dual gemm scalars must be primal");
        let split = |x: &[Self]| -> (Vec<T>, Vec<T>) {
            (x.iter().map(|d| d.re).collect(), x.iter().map(|d| d.eps).collect())
        };
        let (are, aeps) = split(a);
        let (bre, beps) = split(b);
        let (mut cre, mut ceps) = split(c);
        let (al, be) = (alpha.re, beta.re);
        T::gemm(m, k, n, al, &are, a_strides, &bre, b_strides, be, &mut cre, c_strides);
        T::gemm(m, k, n, al, &aeps, a_strides, &bre, b_strides, be, &mut ceps, c_strides);
        T::gemm(m, k, n, al, &are, a_strides, &beps, b_strides, T::one(), &mut ceps, c_strides);
        for ((d, r), e) in c.iter_mut().zip(cre).zip(ceps) {
            *d = Dual { re: r, eps: e };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type D = Dual<f64>;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn elementary_derivatives_match_finite_differences() {
        let x = 0.37;
        let v = D::new(x, 1.0);
        let cases: Vec<(D, f64)> = vec![
            (v.exp(), fd(f64::exp, x)),
            (v.ln(), fd(f64::ln, x)),
            (v.sqrt(), fd(f64::sqrt, x)),
            (v.tanh(), fd(f64::tanh, x)),
            (v.recip(), fd(|t| 1.0 / t, x)),
            (v.powi(3), fd(|t| t.powi(3), x)),
            (v.powf(D::constant(1.7)), fd(|t| t.powf(1.7), x)),
            (v.sin() * v.cos(), fd(|t| t.sin() * t.cos(), x)),
            ((v * v + D::constant(1.0)) / (v - D::constant(2.0)), fd(|t| (t * t + 1.0) / (t - 2.0), x)),
        ];
        for (i, (d, want)) in cases.iter().enumerate() {
            assert!((d.eps - want).abs() < 1e-7, "case {i}: {} vs {want}", d.eps);
        }
    }

    #[test]
    fn gemm_splits_into_primal_products() {
        // 2x3 times 3x2 with tangents on both operands
        let a: Vec<D> = (0..6).map(|i| D::new(i as f64 + 1.0, 0.5 * i as f64)).collect();
        let b: Vec<D> = (0..6).map(|i| D::new(1.0 - i as f64, (i % 2) as f64)).collect();
        let mut c = vec![D::zero(); 4];
        D::gemm(2, 3, 2, D::one(), &a, (3, 1), &b, (2, 1), D::zero(), &mut c, (2, 1));
        for i in 0..2 {
            for j in 0..2 {
                let mut want = D::zero();
                for p in 0..3 {
                    want += a[i * 3 + p] * b[p * 2 + j];
                }
                assert!((c[i * 2 + j].re - want.re).abs() < 1e-12);
                assert!((c[i * 2 + j].eps - want.eps).abs() < 1e-12);
            }
        }
    }
}
