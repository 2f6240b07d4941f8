//! Exact rational helpers shared by the oracles and the generic DPs.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub type Q = BigRational;

/// Number type a forward dynamic program can run in.
pub trait Mass: Clone + PartialEq + std::fmt::Debug {
    fn mass_zero() -> Self;
    fn mass_one() -> Self;
    fn is_nil(&self) -> bool;
    fn add_assign(&mut self, other: &Self);
    /// `self / d` for a positive integer `d`.
    fn div_count(&self, d: u32) -> Self;
    fn mul(&self, other: &Self) -> Self;
    fn to_f64(&self) -> f64;
    /// `self * d` for an integer `d`.
    fn mul_count(&self, d: u32) -> Self;
    /// Multiplies by a positive float; only called on types that can underflow.
    fn scale(&mut self, _f: f64) {}
    /// Whether long products may underflow and need rescaling.
    const UNDERFLOWS: bool = false;
}

impl Mass for f64 {
    fn mass_zero() -> Self {
        0.0
    }
    fn mass_one() -> Self {
        1.0
    }
    fn is_nil(&self) -> bool {
        *self == 0.0
    }
    fn add_assign(&mut self, other: &Self) {
        *self += other;
    }
    fn div_count(&self, d: u32) -> Self {
        self / d as f64
    }
    fn mul(&self, other: &Self) -> Self {
        self * other
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn mul_count(&self, d: u32) -> Self {
        self * d as f64
    }
    fn scale(&mut self, f: f64) {
        *self *= f;
    }
    const UNDERFLOWS: bool = true;
}

impl Mass for Q {
    fn mass_zero() -> Self {
        Zero::zero()
    }
    fn mass_one() -> Self {
        One::one()
    }
    fn is_nil(&self) -> bool {
        Zero::is_zero(self)
    }
    fn add_assign(&mut self, other: &Self) {
        *self += other;
    }
    fn div_count(&self, d: u32) -> Self {
        self / BigInt::from(d)
    }
    fn mul(&self, other: &Self) -> Self {
        self * other
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn mul_count(&self, d: u32) -> Self {
        self * BigInt::from(d)
    }
}

pub fn q(num: i64, den: i64) -> Q {
    Q::new(num.into(), den.into())
}

pub fn q_int(v: i64) -> Q {
    Q::from_integer(v.into())
}

/// Bits kept when enclosures are rounded outward to dyadic rationals.
const DYADIC_BITS: u32 = 256;
/// Taylor terms used for exp; 1/61! < 2^-270.
const EXP_TERMS: u32 = 60;

/// Rational bounds `lo <= exp(x) <= hi` for rational `0 <= x <= 1`.
///
/// The partial sum of the Taylor series is a lower bound; the tail after
/// `EXP_TERMS` terms is at most `3 x^(K+1) / (K+1)!` because e < 3. Both
/// ends are then rounded outward to multiples of 2^-256.
pub fn exp_enclosure(x: &Q) -> (Q, Q) {
    assert!(
        !x.is_negative() && *x <= Q::one(),
        "exp_enclosure expects 0 <= x <= 1"
    );
    let mut term = Q::one();
    let mut sum = Q::one();
    for k in 1..=EXP_TERMS {
        term = term * x / BigInt::from(k);
        sum += &term;
    }
    let tail = term * x / BigInt::from(EXP_TERMS + 1) * BigInt::from(3);
    let hi = sum.clone() + tail;
    (round_down(&sum), round_up(&hi))
}

fn scale() -> BigInt {
    BigInt::one() << DYADIC_BITS
}

pub fn round_down(x: &Q) -> Q {
    let s = scale();
    Q::new((x * &s).floor().to_integer(), s)
}

pub fn round_up(x: &Q) -> Q {
    let s = scale();
    Q::new((x * &s).ceil().to_integer(), s)
}
