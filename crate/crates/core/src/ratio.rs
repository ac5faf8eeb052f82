//! Exact rational helpers and decimal rendering.

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};

pub type Rational = BigRational;

/// `num / den` as an exact rational. Panics if `den` is zero.
pub fn ratio(num: u64, den: u64) -> Rational {
    Rational::new(BigInt::from(num), BigInt::from(den))
}

pub fn int(value: u64) -> Rational {
    Rational::from_integer(BigInt::from(value))
}

pub fn to_f64(value: &Rational) -> f64 {
    value.to_f64().unwrap_or(f64::NAN)
}

/// Renders `value` in positional notation with `digits` significant digits,
/// rounding half away from zero. Zero renders as `0`.
pub fn format_significant(value: &Rational, digits: u32) -> String {
    assert!(digits > 0, "at least one significant digit");
    if value.is_zero() {
        return "0".to_owned();
    }
    let negative = value.is_negative();
    let magnitude = value.abs();
    let numer = magnitude.numer().magnitude().clone();
    let denom = magnitude.denom().magnitude().clone();

    // exponent of the leading digit: 10^e <= value < 10^(e+1)
    let mut e = numer.to_string().len() as i64 - denom.to_string().len() as i64;
    if compare_scaled(&numer, &denom, e) == std::cmp::Ordering::Less {
        e -= 1;
    }
    // scaled = round(value * 10^(digits-1-e))
    let shift = digits as i64 - 1 - e;
    let mut scaled = round_scaled(&numer, &denom, shift);
    let mut shift = shift;
    if scaled.to_string().len() as u32 > digits {
        // rounding carried into a new leading digit
        scaled /= 10u32;
        shift -= 1;
    }
    let digits_str = scaled.to_string();
    let mut out = String::new();
    if negative {
        out.push('-');
    }
    if shift <= 0 {
        out.push_str(&digits_str);
        out.extend(std::iter::repeat_n('0', (-shift) as usize));
    } else {
        let shift = shift as usize;
        if digits_str.len() > shift {
            let (int_part, frac) = digits_str.split_at(digits_str.len() - shift);
            out.push_str(int_part);
            out.push('.');
            out.push_str(frac);
        } else {
            out.push_str("0.");
            out.extend(std::iter::repeat_n('0', shift - digits_str.len()));
            out.push_str(&digits_str);
        }
    }
    out
}

fn pow10(exp: u64) -> BigUint {
    num_traits::pow(BigUint::from(10u32), exp as usize)
}

/// Compares numer/denom against 10^e.
fn compare_scaled(numer: &BigUint, denom: &BigUint, e: i64) -> std::cmp::Ordering {
    if e >= 0 {
        numer.cmp(&(denom * pow10(e as u64)))
    } else {
        (numer * pow10((-e) as u64)).cmp(denom)
    }
}

fn round_scaled(numer: &BigUint, denom: &BigUint, shift: i64) -> BigUint {
    let (n, d) = if shift >= 0 {
        (numer * pow10(shift as u64), denom.clone())
    } else {
        (numer.clone(), denom * pow10((-shift) as u64))
    };
    let (q, r) = n.div_rem(&d);
    if r * 2u32 >= d {
        q + 1u32
    } else {
        q
    }
}
