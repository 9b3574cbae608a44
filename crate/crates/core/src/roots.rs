//! Scalar bracketing and bisection.

use crate::error::{Error, Result};

/// Bisects `f` on `[lo, hi]`, where `f(lo)` and `f(hi)` have opposite signs
/// (infinities allowed), until the interval is no wider than `tol` or cannot
/// shrink further in floating point.
pub fn bisect<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.is_nan() || f_hi.is_nan() || f_lo.signum() == f_hi.signum() {
        return Err(Error::Bracket(format!("no sign change on [{lo:e}, {hi:e}]: f = ({f_lo:e}, {f_hi:e})")));
    }
    let lo_positive = f_lo > 0.0;
    for _ in 0..2100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo.min(hi) || mid >= lo.max(hi) || (hi - lo).abs() <= tol {
            break;
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if f_mid.is_nan() {
            return Err(Error::Bracket(format!("function is NaN at {mid:e}")));
        }
        if (f_mid > 0.0) == lo_positive {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Finds a bracket on the negative half-line for a function that is positive
/// far to the left and negative near zero. Starts at `-1`, doubling outward
/// or halving toward zero.
pub fn bracket_negative<F: FnMut(f64) -> f64>(mut f: F) -> Result<(f64, f64)> {
    let start = -1.0;
    let f_start = f(start);
    if f_start.is_nan() {
        return Err(Error::Bracket("function is NaN at -1".into()));
    }
    if f_start > 0.0 {
        let mut lo = start;
        let mut hi = start * 0.5;
        for _ in 0..1100 {
            if f(hi) <= 0.0 {
                return Ok((lo, hi));
            }
            lo = hi;
            hi *= 0.5;
        }
    } else {
        let mut hi = start;
        let mut lo = start * 2.0;
        for _ in 0..1100 {
            if f(lo) >= 0.0 {
                return Ok((lo, hi));
            }
            hi = lo;
            lo *= 2.0;
        }
    }
    Err(Error::Bracket("sign change not found on the negative half-line".into()))
}
