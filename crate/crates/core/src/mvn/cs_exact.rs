//! Rectangle probability for compound-symmetry correlation by reduction to a
//! single integral.
//!
//! With T_i = √ρ·Y + √(1−ρ)·Z_i and Y, Z_i independent standard normals,
//! conditional on Y the events |T_i| < d are independent, so
//!
//! P(∩|T_i| < d) = ∫ φ(y) [Φ((d − √ρ y)/√(1−ρ)) − Φ((−d − √ρ y)/√(1−ρ))]^m dy.

use crate::error::{Error, Result};
use crate::mvn::normal;
use crate::quad::integrate_adaptive;

/// Target absolute error of the one-dimensional quadrature.
const ABS_TOL: f64 = 1e-13;
/// φ(y) is below 1e-22 outside this range.
const Y_LIMIT: f64 = 10.0;

/// P(|T_i| < d for all i) for m exchangeable standard normals with common
/// correlation ρ ∈ [0, 1).
pub fn cs_rectangle_exact(m: usize, rho: f64, d: f64) -> Result<f64> {
    Ok(1.0 - cs_exceedance_exact(m, rho, d)?)
}

/// 1 − P(∩|T_i| < d), integrated directly so that small values keep their
/// relative accuracy.
pub fn cs_exceedance_exact(m: usize, rho: f64, d: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidParameter(format!(
            "closed form needs 0 <= rho < 1, got {rho}; use the QMC integrator for negative correlation"
        )));
    }
    if m == 0 {
        return Err(Error::InvalidParameter("dimension must be positive".into()));
    }
    if !(d > 0.0) {
        return Ok(1.0);
    }
    if d.is_infinite() {
        return Ok(0.0);
    }
    let mf = m as f64;
    if rho == 0.0 {
        return Ok(exceed_power(2.0 * normal::sf(d), mf));
    }
    let a = rho.sqrt();
    let s = (1.0 - rho).sqrt();
    let integrand = |y: f64| {
        let hi = (d - a * y) / s;
        let lo = (-d - a * y) / s;
        // One-dimensional exceedance probability given Y = y.
        let q = normal::sf(hi) + normal::cdf(lo);
        normal::pdf(y) * exceed_power(q.min(1.0), mf)
    };
    // The integrand varies fastest where √ρ·|y| approaches d; split there.
    let knot = (d / a).min(Y_LIMIT);
    let mut total = 0.0;
    let edges = [-Y_LIMIT, -knot, 0.0, knot, Y_LIMIT];
    for w in edges.windows(2) {
        if w[1] > w[0] {
            total += integrate_adaptive(integrand, w[0], w[1], ABS_TOL / 4.0).value;
        }
    }
    Ok(total.clamp(0.0, 1.0))
}

/// 1 − (1 − q)^m without cancellation for small q.
#[inline]
fn exceed_power(q: f64, m: f64) -> f64 {
    if q >= 1.0 {
        return 1.0;
    }
    -(m * (-q).ln_1p()).exp_m1()
}
