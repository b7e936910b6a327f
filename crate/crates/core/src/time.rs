//! Simulation clock values.
//!
//! The engine is generic over the clock type so that the daily workloads run on
//! `f64` seconds while the scenario verifier drives the very same loop with exact
//! rationals ([`Exact`]).

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_rational::Rational64;
use num_traits::{ToPrimitive, Zero};

/// Exact rational seconds.
pub type Exact = Rational64;

/// Comparison slack used by the floating-point clock.
pub const FLOAT_EPS: f64 = 1e-9;

/// A value on the simulation clock (or a duration measured on it).
pub trait SimTime:
    Copy
    + Debug
    + Display
    + PartialEq
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    fn zero() -> Self;
    fn from_int(v: i64) -> Self;
    fn from_ratio(num: i64, den: i64) -> Self;
    fn to_f64(self) -> f64;

    /// Total order; NaN never reaches the engine because inputs are validated.
    fn total_cmp(&self, other: &Self) -> Ordering;

    /// `self < other` beyond the clock's comparison slack.
    fn definitely_lt(self, other: Self) -> bool;

    fn is_positive(self) -> bool {
        self > Self::zero()
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
}

impl SimTime for f64 {
    fn zero() -> Self {
        0.0
    }

    fn from_int(v: i64) -> Self {
        v as f64
    }

    fn from_ratio(num: i64, den: i64) -> Self {
        num as f64 / den as f64
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        f64::total_cmp(self, other)
    }

    fn definitely_lt(self, other: Self) -> bool {
        self < other - FLOAT_EPS
    }
}

impl SimTime for Exact {
    fn zero() -> Self {
        Zero::zero()
    }

    fn from_int(v: i64) -> Self {
        Rational64::from_integer(v)
    }

    fn from_ratio(num: i64, den: i64) -> Self {
        Rational64::new(num, den)
    }

    fn to_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        self.cmp(other)
    }

    fn definitely_lt(self, other: Self) -> bool {
        self < other
    }
}

/// Parses `"10"`, `"4/3"` or a finite decimal such as `"7.5"` into an exact value.
pub fn parse_exact(text: &str) -> Option<Exact> {
    let text = text.trim();
    if let Ok(v) = text.parse::<Rational64>() {
        return Some(v);
    }
    let (neg, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text),
    };
    let (int_part, frac_part) = body.split_once('.')?;
    if frac_part.is_empty() || frac_part.len() > 12 {
        return None;
    }
    let int: i64 = if int_part.is_empty() {
        0
    } else {
        int_part.parse().ok()?
    };
    let frac: i64 = frac_part.parse().ok()?;
    let den = 10_i64.checked_pow(frac_part.len() as u32)?;
    let v = Rational64::new(int.checked_mul(den)?.checked_add(frac)?, den);
    Some(if neg { -v } else { v })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_integers_fractions_and_decimals() {
        assert_eq!(parse_exact("10"), Some(Exact::from_integer(10)));
        assert_eq!(parse_exact("4/3"), Some(Exact::new(4, 3)));
        assert_eq!(parse_exact("7.5"), Some(Exact::new(15, 2)));
        assert_eq!(parse_exact("-0.25"), Some(Exact::new(-1, 4)));
        assert_eq!(parse_exact("abc"), None);
        assert_eq!(parse_exact("1."), None);
    }

    #[test]
    fn float_clock_uses_slack() {
        assert!(!(1.0_f64).definitely_lt(1.0 + 1e-12));
        assert!((1.0_f64).definitely_lt(1.0 + 1e-6));
        assert!(Exact::new(1, 3).definitely_lt(Exact::new(1, 2)));
    }
}
