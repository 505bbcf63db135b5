//! Bivariate normal probabilities.
//!
//! Upper orthant probabilities follow Drezner & Wesolowsky's integral in the
//! form refined by Genz: Gauss–Legendre quadrature of the Plackett
//! integrand for moderate correlation, and an asymptotic expansion plus
//! correction integral for |r| ≥ 0.925.

use std::f64::consts::TAU;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::mvn::normal;
use crate::quad::GaussLegendre;

fn rules() -> &'static [GaussLegendre; 3] {
    static RULES: OnceLock<[GaussLegendre; 3]> = OnceLock::new();
    RULES.get_or_init(|| [GaussLegendre::new(6), GaussLegendre::new(12), GaussLegendre::new(20)])
}

/// P(X > h, Y > k) for a standard bivariate normal with correlation r.
pub fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    let rule = match r.abs() {
        a if a < 0.3 => &rules()[0],
        a if a < 0.75 => &rules()[1],
        _ => &rules()[2],
    };
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = 0.5 * (h * h + k * k);
        let asr = r.asin();
        for (x, w) in rule.mapped(0.0, asr) {
            let sn = x.sin();
            bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
        }
        bvn = bvn / TAU + normal::cdf(-h) * normal::cdf(-k);
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let as_ = (1.0 - r) * (1.0 + r);
            let mut a = as_.sqrt();
            let bs = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            let asr = -(bs / as_ + hk) / 2.0;
            if asr > -100.0 {
                bvn = a
                    * asr.exp()
                    * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
            }
            if hk > -160.0 {
                let b = bs.sqrt();
                bvn -= (-hk / 2.0).exp()
                    * TAU.sqrt()
                    * normal::cdf(-b / a)
                    * b
                    * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
            }
            a /= 2.0;
            for (x, w) in rule.mapped(-1.0, 1.0) {
                let xs = (a * (x + 1.0)).powi(2);
                let rs = (1.0 - xs).sqrt();
                let asr = -(bs / xs + hk) / 2.0;
                if asr > -100.0 {
                    bvn += a
                        * w
                        * asr.exp()
                        * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                            - (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
            bvn = -bvn / TAU;
        }
        if r > 0.0 {
            bvn += normal::cdf(-h.max(k));
        } else {
            bvn = -bvn;
            if k > h {
                bvn += if h < 0.0 {
                    normal::cdf(k) - normal::cdf(h)
                } else {
                    normal::cdf(-h) - normal::cdf(-k)
                };
            }
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// P(|Z₁| ≥ d, |Z₂| ≥ d) for correlation r.
fn both_exceed(d: f64, r: f64) -> f64 {
    2.0 * (bvn_upper(d, d, r) + bvn_upper(d, d, -r))
}

/// P(|Z₁| < d, |Z₂| < d) for a standard bivariate normal with correlation r.
pub fn bvn_rectangle(d: f64, r: f64) -> Result<f64> {
    Ok(1.0 - bvn_rectangle_exceedance(d, r)?)
}

/// 1 − P(|Z₁| < d, |Z₂| < d), i.e. the probability that at least one
/// coordinate leaves (−d, d).
pub fn bvn_rectangle_exceedance(d: f64, r: f64) -> Result<f64> {
    if !(r.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!("correlation {r} must satisfy |r| < 1")));
    }
    if !(d > 0.0) {
        return Ok(1.0);
    }
    let single = 2.0 * normal::sf(d);
    Ok((2.0 * single - both_exceed(d, r)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate_adaptive;

    // Independent oracle: integrate the conditional probability of Z₂ over Z₁.
    fn rectangle_oracle(d: f64, r: f64) -> f64 {
        let s = (1.0 - r * r).sqrt();
        integrate_adaptive(
            |x| normal::pdf(x) * normal::interval((-d - r * x) / s, (d - r * x) / s),
            -d,
            d,
            1e-15,
        )
        .value
    }

    #[test]
    fn independence() {
        let d = 1.3;
        let p = bvn_rectangle(d, 0.0).unwrap();
        assert!((p - (2.0 * normal::cdf(d) - 1.0).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn matches_quadrature_oracle_across_correlations() {
        for &d in &[0.5, 1.959_964, 3.0, 4.04] {
            for &r in &[-0.99, -0.93, -0.8, -0.5, -0.2, 0.1, 0.29, 0.31, 0.5, 0.74, 0.76, 0.9, 0.926, 0.99, 0.999] {
                let p = bvn_rectangle(d, r).unwrap();
                let o = rectangle_oracle(d, r);
                assert!((p - o).abs() < 1e-14, "d={d} r={r}: {p} vs {o}");
            }
        }
    }

    #[test]
    fn perfect_dependence_limit() {
        let d = 1.959_964;
        let single = 2.0 * normal::cdf(d) - 1.0;
        // The deficit below the single-variable probability shrinks like
        // 2φ(d)·√(ε/π) for r = 1 − ε.
        let eps = 1e-9;
        let p = bvn_rectangle(d, 1.0 - eps).unwrap();
        let deficit = 2.0 * normal::pdf(d) * (eps / std::f64::consts::PI).sqrt();
        assert!((single - p - deficit).abs() < 1e-3 * deficit);
        assert!((bvn_rectangle(d, 1.0 - 1e-12).unwrap() - single).abs() < 1e-6);
        assert!(bvn_rectangle(d, 1.0).is_err());
    }

    #[test]
    fn orthant_symmetry() {
        for &(h, k, r) in &[(0.3, -0.7, 0.4), (1.0, 2.0, -0.95), (-1.0, 0.5, 0.96)] {
            assert!((bvn_upper(h, k, r) - bvn_upper(k, h, r)).abs() < 1e-15);
        }
        assert!((bvn_upper(0.0, 0.0, 0.5) - (0.25 + 0.5f64.asin() / TAU)).abs() < 1e-15);
    }
}
