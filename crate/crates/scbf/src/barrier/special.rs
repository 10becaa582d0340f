//! Error function and its inverse.
//!
//! `erf` uses the positive-term power series for |x| <= 2 and a continued
//! fraction for the complement beyond, accurate to ~1e-15. The inverse is
//! a safeguarded Newton iteration on `erf(x) - y`.

use crate::{Error, Result};

const TWO_OVER_SQRT_PI: f64 = 1.128_379_167_095_512_6;

/// The standard error function.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x <= 2.0 {
        erf_series(x)
    } else {
        1.0 - erfc_cf(x)
    }
}

/// The complementary error function `1 - erf(x)`.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        2.0 - erfc(-x)
    } else if x <= 2.0 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

// erf(x) = 2 x e^{-x^2} / sqrt(pi) * sum_n (2 x^2)^n / (2n+1)!!
// All terms positive, so no cancellation.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut n = 1u32;
    loop {
        term *= 2.0 * x2 / (2 * n + 1) as f64;
        sum += term;
        if term < 1e-18 * sum || n > 200 {
            break;
        }
        n += 1;
    }
    TWO_OVER_SQRT_PI * x * (-x2).exp() * sum
}

// sqrt(pi) e^{x^2} erfc(x) = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
// evaluated with the modified Lentz algorithm.
fn erfc_cf(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut f: f64 = x;
    let mut c: f64 = f;
    let mut d: f64 = 0.0;
    for n in 1..200 {
        let a = n as f64 / 2.0;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (f * std::f64::consts::PI.sqrt())
}

/// Inverse of the error function: returns `x` with `erf(x) = y`.
///
/// Rejects `|y| >= 1`.
pub fn inverse_erf(y: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&y) || y.abs() >= 1.0 {
        return Err(Error::Invariant(format!(
            "inverse_erf requires -1 < y < 1, got {y}"
        )));
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    let sign = y.signum();
    let y = y.abs();

    // bracket [lo, hi] with erf(lo) <= y <= erf(hi)
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while erf(hi) < y {
        lo = hi;
        hi *= 2.0;
        if hi > 40.0 {
            break;
        }
    }
    // Newton with bisection fallback when the step leaves the bracket.
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let r = erf(x) - y;
        if r.abs() <= 1e-15 {
            break;
        }
        if r > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let deriv = TWO_OVER_SQRT_PI * (-x * x).exp();
        let mut next = x - r / deriv;
        if !(lo..=hi).contains(&next) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() < 1e-17 * (1.0 + x.abs()) {
            x = next;
            break;
        }
        x = next;
    }
    Ok(sign * x)
}

/// The confidence scaling `c(delta) = sqrt(2) erf^{-1}(2 delta - 1)` of
/// the deterministic chance-constraint reformulation.
///
/// Negative for `delta < 0.5`; rejects `delta` outside `(0, 1)`.
pub fn confidence_scale(delta: f64) -> Result<f64> {
    if delta <= 0.0 || delta >= 1.0 {
        return Err(Error::Invariant(format!(
            "confidence level delta must lie in (0, 1), got {delta}"
        )));
    }
    Ok(std::f64::consts::SQRT_2 * inverse_erf(2.0 * delta - 1.0)?)
}
