//! Bracketing root finders. Everything in this crate that needs a root has a
//! proven sign change, so plain bisection is enough and never misbehaves.

use crate::error::{Error, Result};

const MAX_ITER: usize = 2000;
const MAX_EXPAND: usize = 200;

/// Bisection on `[lo, hi]` where `f(lo) <= 0 <= f(hi)` (either orientation is
/// accepted). Stops once the bracket is narrower than `rtol * |x|` or cannot
/// shrink any further in floating point.
pub fn bisect<F>(mut f: F, mut lo: f64, mut hi: f64, rtol: f64) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    let flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if !(flo.signum() != fhi.signum()) || flo.is_nan() || fhi.is_nan() {
        return Err(Error::Bracket(format!(
            "no sign change on [{lo}, {hi}]: f = ({flo}, {fhi})"
        )));
    }
    let rising = flo < 0.0;
    for _ in 0..MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || (hi - lo) <= rtol * mid.abs() {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if (fm < 0.0) == rising {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Doubles `hi` from `start` until `f(hi) > 0`.
pub fn expand_upper<F>(mut f: F, start: f64) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    let mut hi = start;
    for _ in 0..MAX_EXPAND {
        let v = f(hi);
        if v > 0.0 {
            return Ok(hi);
        }
        if !v.is_finite() {
            break;
        }
        hi *= 2.0;
    }
    Err(Error::Bracket(format!(
        "upper bracket expansion from {start} did not reach a positive value (last hi = {hi})"
    )))
}
