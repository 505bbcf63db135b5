//! Product-type order-2 approximation of the rectangle probability.
//!
//! P(O₁ ∩ … ∩ O_m) ≈ P(O₁) · Π_{j≥2} P(O_{j−1} ∩ O_j) / P(O_{j−1}),
//! with O_j = {|T_j| < d}. Only correlations between consecutive markers in
//! input order enter, so the approximation is cheap at any dimension.

use crate::corrmat::CorrelationMatrix;
use crate::error::{Error, Result};
use crate::mvn::{bvn, normal};

/// Order-2 approximation of P(∩|T_j| < d) for the given marker order.
pub fn order2_joint(corr: &CorrelationMatrix, d: f64) -> Result<f64> {
    Ok(order2_log_joint(&corr.consecutive(), d)?.exp())
}

/// 1 − order2_joint, evaluated without cancellation.
pub fn order2_exceedance(corr: &CorrelationMatrix, d: f64) -> Result<f64> {
    Ok(-order2_log_joint(&corr.consecutive(), d)?.exp_m1())
}

/// log P under the order-2 approximation from consecutive correlations
/// r_j = corr(T_j, T_{j+1}).
pub fn order2_log_joint(consecutive: &[f64], d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::InvalidParameter(format!("bound {d} must be positive")));
    }
    let single_out = 2.0 * normal::sf(d);
    let log_single = (-single_out).ln_1p();
    let mut log_p = log_single;
    for (j, &r) in consecutive.iter().enumerate() {
        if !(r.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "correlation {r} between markers {} and {} must satisfy |r| < 1",
                j + 1,
                j + 2
            )));
        }
        let pair_out = bvn::bvn_rectangle_exceedance(d, r)?;
        log_p += (-pair_out).ln_1p() - log_single;
    }
    Ok(log_p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrmat::StructuredSpec;

    #[test]
    fn independence_is_power() {
        let d = 2.3;
        let p = order2_joint(&CorrelationMatrix::identity(50), d).unwrap();
        let expected = (2.0 * normal::cdf(d) - 1.0).powi(50);
        assert!((p - expected).abs() < 1e-14);
    }

    #[test]
    fn two_markers_are_exact() {
        let corr = StructuredSpec::compound_symmetry(0.6, 2).unwrap().build().unwrap();
        let p = order2_joint(&corr, 1.7).unwrap();
        assert!((p - bvn::bvn_rectangle(1.7, 0.6).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn ar1_and_tridiagonal_agree_at_equal_rho() {
        let d = 3.9;
        let a = StructuredSpec::ar1(0.5, 100).unwrap().build().unwrap();
        let t = StructuredSpec::tridiagonal(0.5, 100).unwrap().build().unwrap();
        assert_eq!(order2_exceedance(&a, d).unwrap(), order2_exceedance(&t, d).unwrap());
    }
}
