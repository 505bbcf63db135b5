//! Eigenvalue-based estimators of the effective number of independent tests
//! and the algebra linking Meff, the local significance level and the FWER.

use serde::{Deserialize, Serialize};

use crate::corrmat::{clamp_negative_eigenvalues, BlockPartition, CorrelationMatrix, EigenSpectrum};
use crate::error::{Error, Result};

/// Default Gao cutoff: the leading eigenvalues must explain 99.5% of the variance.
pub const GAO_DEFAULT_CUTOFF: f64 = 0.995;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeffMethod {
    Cheverud,
    Nyholt,
    Gao,
    LiJi,
    Galwey,
    /// Product-type second-order approximation of the joint probability.
    Order2,
    /// Root-solved from the exact joint probability.
    Exact,
    /// Supplied by the caller.
    External,
}

impl MeffMethod {
    /// The five eigenvalue-based estimators.
    pub const EIGEN: [MeffMethod; 5] = [
        MeffMethod::Cheverud,
        MeffMethod::Nyholt,
        MeffMethod::Gao,
        MeffMethod::LiJi,
        MeffMethod::Galwey,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MeffMethod::Cheverud => "cheverud",
            MeffMethod::Nyholt => "nyholt",
            MeffMethod::Gao => "gao",
            MeffMethod::LiJi => "liji",
            MeffMethod::Galwey => "galwey",
            MeffMethod::Order2 => "order2",
            MeffMethod::Exact => "exact",
            MeffMethod::External => "external",
        }
    }

    pub fn is_eigen_based(self) -> bool {
        Self::EIGEN.contains(&self)
    }
}

impl std::fmt::Display for MeffMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for MeffMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "cheverud" => MeffMethod::Cheverud,
            "nyholt" => MeffMethod::Nyholt,
            "gao" => MeffMethod::Gao,
            "liji" => MeffMethod::LiJi,
            "galwey" => MeffMethod::Galwey,
            "order2" => MeffMethod::Order2,
            "exact" | "true" => MeffMethod::Exact,
            "external" => MeffMethod::External,
            other => return Err(Error::InvalidParameter(format!("unknown method '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    #[default]
    Sidak,
    Bonferroni,
}

impl Correction {
    pub fn label(self) -> &'static str {
        match self {
            Correction::Sidak => "sidak",
            Correction::Bonferroni => "bonferroni",
        }
    }
}

impl std::str::FromStr for Correction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sidak" => Ok(Correction::Sidak),
            "bonferroni" => Ok(Correction::Bonferroni),
            other => Err(Error::InvalidParameter(format!("unknown correction '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaoConfig {
    pub cutoff: f64,
    /// Contiguous marker blocks of this size are analysed separately and the
    /// counts summed. `None` uses the full matrix.
    pub block_size: Option<usize>,
}

impl Default for GaoConfig {
    fn default() -> Self {
        Self { cutoff: GAO_DEFAULT_CUTOFF, block_size: None }
    }
}

impl GaoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "Gao cutoff {} must lie strictly between 0 and 1",
                self.cutoff
            )));
        }
        if self.block_size == Some(0) {
            return Err(Error::InvalidParameter("Gao block size must be positive".into()));
        }
        Ok(())
    }
}

/// One method's correction: Meff and the local level it implies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeffResult {
    pub method: MeffMethod,
    pub meff: f64,
    pub alpha: f64,
    pub alpha_loc: f64,
    pub correction: Correction,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub params: serde_json::Map<String, serde_json::Value>,
}

impl MeffResult {
    pub fn from_meff(method: MeffMethod, meff: f64, alpha: f64, correction: Correction) -> Result<Self> {
        let alpha_loc = alpha_loc_from_meff(meff, alpha, correction)?;
        Ok(Self { method, meff, alpha, alpha_loc, correction, params: Default::default() })
    }

    /// From a solved local level; Meff follows from the Šidák relation.
    pub fn from_alpha_loc(method: MeffMethod, alpha_loc: f64, alpha: f64) -> Result<Self> {
        let meff = meff_from_alpha(alpha_loc, alpha)?;
        Ok(Self {
            method,
            meff,
            alpha,
            alpha_loc,
            correction: Correction::Sidak,
            params: Default::default(),
        })
    }

    pub fn with_param(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.params.insert(key.to_owned(), value.into());
        self
    }
}

fn check_dim(s: &EigenSpectrum) -> Result<usize> {
    let m = s.dim();
    if m < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 eigenvalues, got {m}")));
    }
    Ok(m)
}

/// Sample variance (denominator m − 1) of the eigenvalues.
fn eigen_variance(lambdas: &[f64]) -> f64 {
    let m = lambdas.len() as f64;
    let mean = lambdas.iter().sum::<f64>() / m;
    lambdas.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (m - 1.0)
}

/// Cheverud: m(1 − (m − 1)Var(λ)/m²).
pub fn meff_cheverud(s: &EigenSpectrum) -> Result<f64> {
    let m = check_dim(s)? as f64;
    let var = eigen_variance(s.lambdas());
    Ok((m * (1.0 - (m - 1.0) * var / (m * m))).clamp(1.0, m))
}

/// Nyholt's rewriting: 1 + (m − 1)(1 − Var(λ)/m).
pub fn meff_nyholt(s: &EigenSpectrum) -> Result<f64> {
    let m = check_dim(s)? as f64;
    let var = eigen_variance(s.lambdas());
    Ok((1.0 + (m - 1.0) * (1.0 - var / m)).clamp(1.0, m))
}

/// Gao on a single spectrum: the smallest k whose leading k eigenvalues
/// explain at least the fraction `cutoff` of m.
///
/// Negative eigenvalues are treated as zero.
pub fn meff_gao(s: &EigenSpectrum, cutoff: f64) -> Result<f64> {
    GaoConfig { cutoff, block_size: None }.validate()?;
    let m = s.dim();
    let mut cumulative = 0.0;
    for (k, &l) in s.lambdas().iter().enumerate() {
        cumulative += l.max(0.0);
        if cumulative / m as f64 >= cutoff {
            return Ok((k + 1) as f64);
        }
    }
    Ok(m as f64)
}

/// Gao on a correlation matrix, optionally block-wise over contiguous markers.
pub fn meff_gao_matrix(r: &CorrelationMatrix, cfg: &GaoConfig) -> Result<f64> {
    cfg.validate()?;
    match cfg.block_size {
        None => meff_gao(&r.eigen_spectrum(), cfg.cutoff),
        Some(size) => BlockPartition::contiguous(r.dim(), size)?
            .blocks()
            .iter()
            .map(|b| meff_gao(&r.block(b.clone()).eigen_spectrum(), cfg.cutoff))
            .sum(),
    }
}

/// Li and Ji: Σ f(|λ|) with f(x) = I(x ≥ 1) + (x − ⌊x⌋).
pub fn meff_liji(s: &EigenSpectrum) -> Result<f64> {
    Ok(s
        .lambdas()
        .iter()
        .map(|l| {
            let x = l.abs();
            let indicator = if x >= 1.0 { 1.0 } else { 0.0 };
            indicator + (x - x.floor())
        })
        .sum())
}

/// Galwey: (Σ√λ)² / Σλ after setting negative eigenvalues to zero.
pub fn meff_galwey(s: &EigenSpectrum) -> Result<f64> {
    let clamped = clamp_negative_eigenvalues(s);
    let total: f64 = clamped.lambdas().iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidParameter("all eigenvalues are zero".into()));
    }
    let root_sum: f64 = clamped.lambdas().iter().map(|l| l.sqrt()).sum();
    Ok(root_sum * root_sum / total)
}

/// Meff from one of the five eigenvalue estimators.
pub fn estimate_from_spectrum(method: MeffMethod, s: &EigenSpectrum, gao_cutoff: f64) -> Result<f64> {
    match method {
        MeffMethod::Cheverud => meff_cheverud(s),
        MeffMethod::Nyholt => meff_nyholt(s),
        MeffMethod::Gao => meff_gao(s, gao_cutoff),
        MeffMethod::LiJi => meff_liji(s),
        MeffMethod::Galwey => meff_galwey(s),
        other => Err(Error::InvalidParameter(format!("{other} is not an eigenvalue-based estimator"))),
    }
}

/// Eigen-based estimate on a matrix with its local level attached.
pub fn estimate(
    method: MeffMethod,
    r: &CorrelationMatrix,
    gao: &GaoConfig,
    alpha: f64,
    correction: Correction,
) -> Result<MeffResult> {
    let meff = match method {
        MeffMethod::Gao => meff_gao_matrix(r, gao)?,
        _ => estimate_from_spectrum(method, &r.eigen_spectrum(), gao.cutoff)?,
    };
    finish(method, meff, gao, alpha, correction)
}

/// Eigen-based estimate from a precomputed whole-matrix spectrum. Block-wise
/// Gao needs the matrix, so it is rejected here.
pub fn estimate_on_spectrum(
    method: MeffMethod,
    s: &EigenSpectrum,
    gao: &GaoConfig,
    alpha: f64,
    correction: Correction,
) -> Result<MeffResult> {
    if method == MeffMethod::Gao && gao.block_size.is_some() {
        return Err(Error::InvalidParameter("block-wise Gao needs the correlation matrix".into()));
    }
    finish(method, estimate_from_spectrum(method, s, gao.cutoff)?, gao, alpha, correction)
}

fn finish(method: MeffMethod, meff: f64, gao: &GaoConfig, alpha: f64, correction: Correction) -> Result<MeffResult> {
    let mut res = MeffResult::from_meff(method, meff, alpha, correction)?;
    if method == MeffMethod::Gao {
        res = res.with_param("cutoff", gao.cutoff);
        if let Some(b) = gao.block_size {
            res = res.with_param("block_size", b);
        }
    }
    Ok(res)
}

fn check_level(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} = {v} must lie in (0, 1)")))
    }
}

/// Local level for Meff tests at FWER alpha.
///
/// Šidák: 1 − (1 − α)^(1/Meff); Bonferroni: α/Meff.
pub fn alpha_loc_from_meff(meff: f64, alpha: f64, correction: Correction) -> Result<f64> {
    check_level("alpha", alpha)?;
    if !(meff >= 1.0) || !meff.is_finite() {
        return Err(Error::InvalidParameter(format!("Meff = {meff} must be at least 1")));
    }
    Ok(match correction {
        Correction::Sidak => -((-alpha).ln_1p() / meff).exp_m1(),
        Correction::Bonferroni => alpha / meff,
    })
}

/// Meff = log(1 − α)/log(1 − α_loc).
pub fn meff_from_alpha(alpha_loc: f64, alpha: f64) -> Result<f64> {
    check_level("alpha_loc", alpha_loc)?;
    check_level("alpha", alpha)?;
    Ok((-alpha).ln_1p() / (-alpha_loc).ln_1p())
}

/// Total Meff over independent blocks sharing a common local level:
/// Σ_b log(1 − α_b)/log(1 − α_loc).
pub fn compose_blocks(per_block_alphas: &[f64], alpha_loc: f64) -> Result<f64> {
    check_level("alpha_loc", alpha_loc)?;
    let denom = (-alpha_loc).ln_1p();
    per_block_alphas.iter().try_fold(0.0, |acc, &a| {
        check_level("block alpha", a)?;
        Ok(acc + (-a).ln_1p() / denom)
    })
}

/// Equal per-block FWER levels α_b = 1 − (1 − α)^(1/B).
pub fn stange_block_alphas(n_blocks: usize, alpha: f64) -> Result<Vec<f64>> {
    check_level("alpha", alpha)?;
    if n_blocks == 0 {
        return Err(Error::InvalidParameter("number of blocks must be positive".into()));
    }
    let a = -((-alpha).ln_1p() / n_blocks as f64).exp_m1();
    Ok(vec![a; n_blocks])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrmat::StructuredSpec;

    fn cs_spectrum(rho: f64, m: usize) -> EigenSpectrum {
        EigenSpectrum::from_eigenvalues(
            StructuredSpec::compound_symmetry(rho, m).unwrap().closed_form_eigenvalues().unwrap(),
        )
    }

    #[test]
    fn analytic_values_for_cs_rho_01() {
        let s = cs_spectrum(0.1, 1000);
        assert!((meff_cheverud(&s).unwrap() - 990.01).abs() < 1e-9);
        assert!((meff_nyholt(&s).unwrap() - 990.01).abs() < 1e-9);
        assert_eq!(meff_gao(&s, 0.995).unwrap(), 995.0);
        assert!((meff_liji(&s).unwrap() - 901.0).abs() < 1e-9);
        assert!((meff_galwey(&s).unwrap() - 917.34).abs() < 5e-3);
    }

    #[test]
    fn identity_and_complete_dependence() {
        let id = EigenSpectrum::from_eigenvalues(vec![1.0; 1000]);
        assert_eq!(meff_cheverud(&id).unwrap(), 1000.0);
        assert_eq!(meff_nyholt(&id).unwrap(), 1000.0);
        assert_eq!(meff_liji(&id).unwrap(), 1000.0);
        assert!((meff_galwey(&id).unwrap() - 1000.0).abs() < 1e-9);
        // 995 unit eigenvalues reach exactly 99.5%.
        assert_eq!(meff_gao(&id, 0.995).unwrap(), 995.0);

        let mut dep = vec![0.0; 50];
        dep[0] = 50.0;
        let dep = EigenSpectrum::from_eigenvalues(dep);
        assert!((meff_cheverud(&dep).unwrap() - 1.0).abs() < 1e-12);
        assert!((meff_nyholt(&dep).unwrap() - 1.0).abs() < 1e-12);
        assert!((meff_galwey(&dep).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cs_block_values() {
        let s = cs_spectrum(0.7, 10);
        assert!((meff_cheverud(&s).unwrap() - 5.59).abs() < 1e-12);
        let expected = (7.3f64.sqrt() + 9.0 * 0.3f64.sqrt()).powi(2) / 10.0;
        assert!((meff_galwey(&s).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 5.8238).abs() < 5e-5);
        assert!((meff_liji(&s).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(meff_gao(&s, 0.995).unwrap(), 10.0);
    }

    #[test]
    fn gao_block_mode_sums_block_counts() {
        let block = StructuredSpec::compound_symmetry(0.7, 10).unwrap().build().unwrap();
        let r = CorrelationMatrix::block_diagonal(&vec![block; 100]).unwrap();
        let per_block = GaoConfig { cutoff: 0.995, block_size: Some(10) };
        assert_eq!(meff_gao_matrix(&r, &per_block).unwrap(), 1000.0);
        let full = GaoConfig::default();
        assert_eq!(meff_gao_matrix(&r, &full).unwrap(), 984.0);
    }

    #[test]
    fn errors() {
        let one = EigenSpectrum::from_eigenvalues(vec![1.0]);
        assert!(meff_cheverud(&one).is_err());
        assert!(meff_nyholt(&one).is_err());
        let s = cs_spectrum(0.1, 10);
        assert!(meff_gao(&s, 1.0).is_err());
        assert!(meff_gao(&s, 0.0).is_err());
        assert!(meff_galwey(&EigenSpectrum::from_eigenvalues(vec![0.0, 0.0])).is_err());
        assert!(compose_blocks(&[0.01, 1.0], 1e-4).is_err());
        assert!(stange_block_alphas(0, 0.05).is_err());
    }

    #[test]
    fn liji_uses_magnitudes() {
        let s = EigenSpectrum::from_eigenvalues(vec![2.5, 0.6, -0.1]);
        assert!((meff_liji(&s).unwrap() - (1.5 + 0.6 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn alpha_loc_conversions() {
        let a = alpha_loc_from_meff(990.01, 0.05, Correction::Sidak).unwrap();
        assert!((a * 1e5 - 5.1810).abs() < 5e-5);
        let a = alpha_loc_from_meff(1000.0, 0.05, Correction::Sidak).unwrap();
        assert!((a * 1e5 - 5.1292).abs() < 5e-5);
        assert!((alpha_loc_from_meff(1.0, 0.05, Correction::Sidak).unwrap() - 0.05).abs() < 1e-16);
        assert_eq!(alpha_loc_from_meff(100.0, 0.05, Correction::Bonferroni).unwrap(), 5e-4);
        assert!(alpha_loc_from_meff(0.5, 0.05, Correction::Sidak).is_err());

        assert!((meff_from_alpha(7.3049e-5, 0.05).unwrap() - 702.15).abs() < 5e-3);
        assert!((meff_from_alpha(0.05, 0.05).unwrap() - 1.0).abs() < 1e-15);
        // log(0.95)/log(1 − 5.3367e-5) evaluated with extended precision: 961.11690...
        assert!((meff_from_alpha(5.3367e-5, 0.05).unwrap() - 961.116_902).abs() < 1e-5);
    }

    #[test]
    fn stange_levels() {
        assert_eq!(stange_block_alphas(1, 0.05).unwrap(), vec![0.05]);
        let two = stange_block_alphas(2, 0.05).unwrap();
        assert!((two[0] - (1.0 - 0.95f64.sqrt())).abs() < 1e-16);
        assert!((two[0] - 0.02532).abs() < 5e-6);
        let hundred = stange_block_alphas(100, 0.05).unwrap();
        assert_eq!(hundred.len(), 100);
        // 1 − 0.95^(1/100) in extended precision.
        assert!((hundred[0] - 5.128_014_162_622_921e-4).abs() < 1e-18);
    }

    #[test]
    fn block_composition() {
        let b = 7;
        let alphas = stange_block_alphas(b, 0.05).unwrap();
        let alpha_loc = 3e-4;
        let total = compose_blocks(&alphas, alpha_loc).unwrap();
        assert!((total - meff_from_alpha(alpha_loc, 0.05).unwrap()).abs() < 1e-9 * total);
        assert!((compose_blocks(&[0.01], alpha_loc).unwrap() - meff_from_alpha(alpha_loc, 0.01).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn method_names_round_trip() {
        for m in MeffMethod::EIGEN {
            assert_eq!(m.label().parse::<MeffMethod>().unwrap(), m);
        }
        assert_eq!("Li-Ji".parse::<MeffMethod>().unwrap(), MeffMethod::LiJi);
        assert!("foo".parse::<MeffMethod>().is_err());
    }
}
