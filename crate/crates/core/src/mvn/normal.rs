//! Univariate standard normal helpers with tail-accurate evaluation.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use libm::erfc;
use statrs::function::erf::erfc_inv;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function Φ(x).
#[inline]
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail 1 − Φ(x), accurate for large positive x.
#[inline]
pub fn sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Φ(b) − Φ(a) for a ≤ b without cancellation in either tail.
#[inline]
pub fn interval(a: f64, b: f64) -> f64 {
    if a >= b {
        return 0.0;
    }
    if a > 0.0 {
        sf(a) - sf(b)
    } else if b < 0.0 {
        cdf(b) - cdf(a)
    } else {
        (1.0 - cdf(a) - sf(b)).max(0.0)
    }
}

/// Quantile function Φ⁻¹(p).
///
/// The erfc-based starting value is polished with one Halley step, which
/// brings the relative error of Φ(x) − p to a few ulps even deep in the tails.
pub fn quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        return -quantile_lower(1.0 - p);
    }
    quantile_lower(p)
}

/// Upper-tail quantile: the x with 1 − Φ(x) = q.
pub fn isf(q: f64) -> f64 {
    -quantile(q)
}

fn quantile_lower(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p <= 0.5);
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    if !x.is_finite() {
        return x;
    }
    let density = pdf(x);
    if density <= 0.0 {
        return x;
    }
    // Halley step on Φ(x) − p, using the lower tail for the residual.
    let t = (cdf(x) - p) / density;
    x - t / (1.0 + 0.5 * x * t)
}

/// Φ⁻¹(p) without the polishing step: relative error near 1e-15 at half
/// the cost, for inner loops where the sampled point only needs to be
/// consistent, not correctly rounded.
#[inline]
pub fn quantile_fast(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        SQRT_2 * erfc_inv(2.0 * (1.0 - p))
    } else {
        -SQRT_2 * erfc_inv(2.0 * p)
    }
}

/// Two-sided critical value d with P(|Z| ≥ d) = alpha_loc.
pub fn two_sided_critical(alpha_loc: f64) -> f64 {
    isf(0.5 * alpha_loc)
}

/// Two-sided tail probability P(|Z| ≥ |t|) = 2Φ(−|t|).
pub fn two_sided_pvalue(t: f64) -> f64 {
    2.0 * sf(t.abs())
}
