//! Exact rational arithmetic for quantization scale bookkeeping.
//!
//! Quantization scales are quotients of floating point magnitudes and powers
//! of two. Every finite `f32`/`f64` is itself a rational with a power-of-two
//! denominator, so tracking scales as arbitrary-precision rationals keeps the
//! pipeline's algebraic identities exact: products and quotients of scales
//! never drift, and the integer fixups derived from them are reproducible
//! bit for bit across platforms.

use num::bigint::BigInt;
use num::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Arbitrary-precision rational used for all scale arithmetic.
pub type Rational = num::BigRational;

/// Builds `numer / denom`. Panics if `denom` is zero.
pub fn new(numer: i64, denom: i64) -> Rational {
    Rational::new(BigInt::from(numer), BigInt::from(denom))
}

/// Builds the integer rational `v / 1`.
pub fn from_i64(v: i64) -> Rational {
    Rational::from_integer(BigInt::from(v))
}

/// Builds `2^exp` for any sign of `exp`.
pub fn pow2(exp: i32) -> Rational {
    let mag = BigInt::one() << exp.unsigned_abs();
    if exp >= 0 {
        Rational::from_integer(mag)
    } else {
        Rational::new(BigInt::one(), mag)
    }
}

/// Converts a finite `f64` to its exact rational value.
pub fn from_f64(x: f64, context: &str) -> Result<Rational> {
    Rational::from_float(x).ok_or_else(|| Error::non_finite(context))
}

/// Converts a finite `f32` to its exact rational value.
pub fn from_f32(x: f32, context: &str) -> Result<Rational> {
    Rational::from_float(x).ok_or_else(|| Error::non_finite(context))
}

/// Nearest `f64` to the rational, computed through a scaled integer quotient.
///
/// The library conversion divides `numer as f64` by `denom as f64`, which
/// turns into `inf / inf = NaN` once both sides exceed the float range.
/// Scale products routinely have thousand-bit numerators and denominators,
/// so the quotient is formed with 64 significant bits first and the
/// power-of-two scaling is reapplied afterwards.
pub fn to_f64(r: &Rational) -> f64 {
    if r.is_zero() {
        return 0.0;
    }
    let numer = r.numer().abs();
    let denom = r.denom().clone();
    let shift = denom.bits() as i64 - numer.bits() as i64 + 64;
    let scaled = if shift >= 0 {
        numer << shift as u64
    } else {
        numer >> (-shift) as u64
    };
    let quotient = (scaled / denom).to_f64().unwrap_or(f64::INFINITY);
    let magnitude = if shift.unsigned_abs() <= i32::MAX as u64 {
        quotient * (-shift as f64).exp2()
    } else if shift > 0 {
        0.0
    } else {
        f64::INFINITY
    };
    if r.is_negative() {
        -magnitude
    } else {
        magnitude
    }
}

/// Rounds to the nearest integer with ties away from zero.
pub fn round_half_away(r: &Rational) -> BigInt {
    let toward_zero = r.trunc().to_integer();
    let fract = r.fract().abs();
    if fract >= new(1, 2) {
        if r.is_negative() {
            toward_zero - BigInt::one()
        } else {
            toward_zero + BigInt::one()
        }
    } else {
        toward_zero
    }
}

/// [`round_half_away`] narrowed to `i64`, failing if the result does not fit.
pub fn round_half_away_i64(r: &Rational, context: &str) -> Result<i64> {
    round_half_away(r)
        .to_i64()
        .ok_or_else(|| Error::overflow(context.to_string()))
}

/// Rounds to nearest with ties away from zero. This is exactly `f64::round`,
/// named so call sites read as the rounding rule they implement.
pub fn round_half_away_f64(x: f64) -> f64 {
    x.round()
}

/// Parses `"p/q"` or `"p"` with decimal integers. Returns `None` on malformed
/// input or a non-positive denominator.
pub fn parse(s: &str) -> Option<Rational> {
    let (numer, denom) = match s.split_once('/') {
        Some((n, d)) => (n, d),
        None => (s, "1"),
    };
    let numer: BigInt = numer.parse().ok()?;
    let denom: BigInt = denom.parse().ok()?;
    if denom <= BigInt::zero() {
        return None;
    }
    Some(Rational::new(numer, denom))
}

/// Canonical text form: reduced `"p/q"`, or `"p"` when the denominator is 1.
pub fn format(r: &Rational) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_convert_exactly() {
        let r = from_f64(0.1, "x").unwrap();
        assert_eq!(to_f64(&r), 0.1);
        let r = from_f32(1.27f32, "x").unwrap();
        assert_eq!(to_f64(&r), 1.27f32 as f64);
        assert!(from_f64(f64::NAN, "x").is_err());
        assert!(from_f64(f64::INFINITY, "x").is_err());
    }

    #[test]
    fn round_half_away_breaks_ties_away_from_zero() {
        let cases = [
            (new(1, 2), 1),
            (new(-1, 2), -1),
            (new(3, 2), 2),
            (new(-3, 2), -2),
            (new(5, 2), 3),
            (new(2, 5), 0),
            (new(-2, 5), 0),
            (new(7, 1), 7),
        ];
        for (r, want) in cases {
            assert_eq!(round_half_away(&r), BigInt::from(want), "{r}");
        }
        assert_eq!(round_half_away_f64(0.5), 1.0);
        assert_eq!(round_half_away_f64(-0.5), -1.0);
        assert_eq!(round_half_away_f64(2.5), 3.0);
        assert_eq!(round_half_away_f64(-2.5), -3.0);
    }

    #[test]
    fn to_f64_handles_huge_terms() {
        // Both sides far outside the f64 range; the value itself is modest.
        let big = Rational::from_integer(BigInt::one() << 4000u32);
        let r = &big * new(3, 4) / &big;
        assert_eq!(to_f64(&r), 0.75);

        let product = new(1, 10).pow(150) * new(10, 1).pow(150) * new(355, 113);
        let expected = 355.0 / 113.0;
        assert!((to_f64(&product) - expected).abs() < 1e-12);
    }

    #[test]
    fn parse_and_format_round_trip() {
        for s in ["3/4", "-3/4", "12", "-12", "0", "355/113"] {
            let r = parse(s).unwrap();
            assert_eq!(format(&r), s);
        }
        assert_eq!(format(&parse("6/8").unwrap()), "3/4");
        assert!(parse("1/0").is_none());
        assert!(parse("1/-2").is_none());
        assert!(parse("a/b").is_none());
        assert!(parse("1.5").is_none());
    }

    #[test]
    fn pow2_covers_both_signs() {
        assert_eq!(pow2(0), from_i64(1));
        assert_eq!(pow2(15), from_i64(32768));
        assert_eq!(pow2(-3), new(1, 8));
    }
}
