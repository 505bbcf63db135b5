//! GLM score tests of single markers against a null model containing only the
//! environmental covariates, and the correlation matrix of the standardized
//! statistics.
//!
//! With X_e the covariates, X_g the genotypes and Λ = diag Var(Y_i):
//!
//! U = X_gᵀ(Y − μ̂_e)/φ,
//! V = (X_gᵀΛX_g − X_gᵀΛX_e(X_eᵀΛX_e)⁻¹X_eᵀΛX_g)/φ²,
//! T_j = U_j/√V_jj.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corrmat::CorrelationMatrix;
use crate::dataset::{GenotypeDataset, MissingGenotypes};
use crate::error::{Error, Result};
use crate::mvn::normal;

const MAX_IRLS_ITER: usize = 50;
const IRLS_TOL: f64 = 1e-10;
const MIN_VARIANCE: f64 = 1e-12;
/// Fitted Bernoulli means closer than this to 0 or 1 indicate separation.
const SEPARATION_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Identity link, constant variance.
    Gaussian,
    /// Logit link.
    Bernoulli,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" | "linear" => Ok(Family::Gaussian),
            "bernoulli" | "binomial" | "logistic" => Ok(Family::Bernoulli),
            other => Err(Error::InvalidParameter(format!("unknown family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullModelFit {
    pub family: Family,
    pub coefficients: Vec<f64>,
    pub fitted_means: Vec<f64>,
    /// Estimated Var(Y_i).
    pub lambda_diag: Vec<f64>,
    pub dispersion: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreStatistics {
    /// Markers that entered the analysis; monomorphic ones are dropped.
    pub marker_ids: Vec<String>,
    pub excluded: Vec<String>,
    pub u: Vec<f64>,
    pub v_diag: Vec<f64>,
    pub t: Vec<f64>,
    pub t_corr: CorrelationMatrix,
}

/// Fails on the first covariate column that is a linear combination of the
/// earlier ones.
fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col;
        for q in &basis {
            let c = q.dot(&r);
            r.axpy(-c, q, 1.0);
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= 1e-10 * norm {
            return Err(Error::RankDeficient(format!("covariate column {}", j + 1)));
        }
        basis.push(r / rn);
    }
    Ok(())
}

/// Solves the weighted normal equations XᵀWXβ = XᵀWz.
fn weighted_ls(x: &DMatrix<f64>, w: &[f64], z: &[f64]) -> Result<DVector<f64>> {
    let w = DVector::from_column_slice(w);
    let mut xw = x.clone();
    for (mut row, &wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= wi;
    }
    let gram = x.tr_mul(&xw);
    let rhs = xw.tr_mul(&DVector::from_column_slice(z));
    gram.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::RankDeficient("weighted covariate cross-product is singular".into()))
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Maximum-likelihood fit of the covariates-only model.
pub fn fit_null_model(data: &GenotypeDataset, family: Family) -> Result<NullModelFit> {
    let y = data
        .phenotype
        .as_deref()
        .ok_or_else(|| Error::Data("score tests need a phenotype".into()))?;
    fit_null(y, &data.covariates, family)
}

fn fit_null(y: &[f64], x: &DMatrix<f64>, family: Family) -> Result<NullModelFit> {
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(Error::Data(format!("phenotype has {} values for {n} samples", y.len())));
    }
    if n <= d {
        return Err(Error::Data(format!("need more samples ({n}) than covariates ({d})")));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("phenotype of sample {} is not finite", i + 1)));
    }
    check_full_rank(x)?;
    match family {
        Family::Gaussian => {
            let beta = weighted_ls(x, &vec![1.0; n], y)?;
            let mu: Vec<f64> = (x * &beta).iter().copied().collect();
            let rss: f64 = y.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum();
            let phi = rss / (n - d) as f64;
            if !(phi > 0.0) {
                return Err(Error::Data("phenotype is fitted exactly by the covariates".into()));
            }
            Ok(NullModelFit {
                family,
                coefficients: beta.iter().copied().collect(),
                fitted_means: mu,
                lambda_diag: vec![phi; n],
                dispersion: phi,
                iterations: 1,
                converged: true,
            })
        }
        Family::Bernoulli => {
            if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!(
                    "Bernoulli phenotype of sample {} is {}, expected 0 or 1",
                    i + 1,
                    y[i]
                )));
            }
            let mut mu: Vec<f64> = y.iter().map(|v| (v + 0.5) / 2.0).collect();
            let mut eta: Vec<f64> = mu.iter().map(|m| (m / (1.0 - m)).ln()).collect();
            let mut beta = DVector::zeros(d);
            let mut converged = false;
            let mut iterations = 0;
            while iterations < MAX_IRLS_ITER {
                iterations += 1;
                let w: Vec<f64> = mu.iter().map(|m| m * (1.0 - m)).collect();
                let z: Vec<f64> = (0..n).map(|i| eta[i] + (y[i] - mu[i]) / w[i]).collect();
                let next = weighted_ls(x, &w, &z)?;
                let change = (&next - &beta).amax();
                beta = next;
                eta = (x * &beta).iter().copied().collect();
                mu = eta.iter().map(|&e| logistic(e)).collect();
                if mu.iter().any(|&m| !(m > SEPARATION_EPS && m < 1.0 - SEPARATION_EPS)) {
                    return Err(Error::Separation);
                }
                if change < IRLS_TOL {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::NoConvergence(format!(
                    "logistic null model after {MAX_IRLS_ITER} IRLS iterations"
                )));
            }
            Ok(NullModelFit {
                family,
                coefficients: beta.iter().copied().collect(),
                lambda_diag: mu.iter().map(|m| m * (1.0 - m)).collect(),
                fitted_means: mu,
                dispersion: 1.0,
                iterations,
                converged,
            })
        }
    }
}

/// Score statistics for complete genotypes.
pub fn score_statistics(data: &GenotypeDataset, fit: &NullModelFit) -> Result<ScoreStatistics> {
    let y = data
        .phenotype
        .as_deref()
        .ok_or_else(|| Error::Data("score tests need a phenotype".into()))?;
    let genotypes = data.dense_complete()?;
    score_statistics_dense(&genotypes, &data.marker_ids, y, &data.covariates, fit)
}

/// Score statistics from a dense genotype matrix (which may hold imputed,
/// non-integer values).
pub fn score_statistics_dense(
    genotypes: &DMatrix<f64>,
    marker_ids: &[String],
    y: &[f64],
    covariates: &DMatrix<f64>,
    fit: &NullModelFit,
) -> Result<ScoreStatistics> {
    let (n, m) = genotypes.shape();
    if covariates.nrows() != n || y.len() != n || fit.fitted_means.len() != n {
        return Err(Error::Data("genotypes, phenotype, covariates and null fit disagree on n".into()));
    }
    if marker_ids.len() != m {
        return Err(Error::Data("marker identifiers do not match the genotype columns".into()));
    }
    let phi = fit.dispersion;
    let resid = DVector::from_iterator(n, y.iter().zip(&fit.fitted_means).map(|(a, b)| a - b));
    let u_all = genotypes.tr_mul(&resid) / phi;

    // Λ^{1/2}X_g projected off the column space of Λ^{1/2}X_e.
    let sqrt_l: Vec<f64> = fit.lambda_diag.iter().map(|v| v.sqrt()).collect();
    let mut a = genotypes.clone();
    let mut b = covariates.clone();
    for i in 0..n {
        a.row_mut(i).scale_mut(sqrt_l[i]);
        b.row_mut(i).scale_mut(sqrt_l[i]);
    }
    let q = b.qr().q();
    let resid_g = &a - &q * q.tr_mul(&a);
    let v = resid_g.tr_mul(&resid_g) / (phi * phi);

    let mut keep = Vec::with_capacity(m);
    let mut excluded = Vec::new();
    for j in 0..m {
        if v[(j, j)] > MIN_VARIANCE {
            keep.push(j);
        } else {
            warn!("marker {} has no variance left after the null model; excluded", marker_ids[j]);
            excluded.push(marker_ids[j].clone());
        }
    }
    let k = keep.len();
    let v_diag: Vec<f64> = keep.iter().map(|&j| v[(j, j)]).collect();
    let u: Vec<f64> = keep.iter().map(|&j| u_all[j]).collect();
    let t: Vec<f64> = u.iter().zip(&v_diag).map(|(u, v)| u / v.sqrt()).collect();
    let mut corr = DMatrix::identity(k, k);
    for a in 0..k {
        for b in 0..a {
            let r = v[(keep[a], keep[b])] / (v_diag[a] * v_diag[b]).sqrt();
            corr[(a, b)] = r.clamp(-1.0, 1.0);
            corr[(b, a)] = corr[(a, b)];
        }
    }
    Ok(ScoreStatistics {
        marker_ids: keep.iter().map(|&j| marker_ids[j].clone()).collect(),
        excluded,
        u,
        v_diag,
        t,
        t_corr: CorrelationMatrix::new(corr)?,
    })
}

/// Null fit plus score statistics, handling missing calls by `policy`.
pub fn score_test(data: &GenotypeDataset, family: Family, policy: MissingGenotypes) -> Result<(NullModelFit, ScoreStatistics)> {
    let (genotypes, rows) = data.dense_with_policy(policy)?;
    let data = if rows.len() == data.n_samples() { data.clone() } else { data.select_samples(&rows)? };
    let y = data
        .phenotype
        .as_deref()
        .ok_or_else(|| Error::Data("score tests need a phenotype".into()))?;
    let fit = fit_null(y, &data.covariates, family)?;
    let stats = score_statistics_dense(&genotypes, &data.marker_ids, y, &data.covariates, &fit)?;
    Ok((fit, stats))
}

/// Two-sided p-values 2Φ(−|t_j|).
pub fn marker_pvalues(stats: &ScoreStatistics) -> Vec<f64> {
    stats.t.iter().map(|&t| normal::two_sided_pvalue(t)).collect()
}

/// Markers whose p-value is at most `alpha_loc`.
pub fn significant(stats: &ScoreStatistics, alpha_loc: f64) -> Vec<bool> {
    marker_pvalues(stats).into_iter().map(|p| p <= alpha_loc).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(n: usize, m: usize, seed: u64) -> GenotypeDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let calls = (0..n * m).map(|_| Some(rng.gen_range(0..3u8))).collect();
        let y = (0..n).map(|_| rng.gen::<f64>() * 3.0).collect();
        GenotypeDataset::new(n, m, calls).unwrap().with_phenotype(y).unwrap()
    }

    #[test]
    fn intercept_only_fits_are_sample_means() {
        let data = random_dataset(40, 3, 1);
        let y = data.phenotype.clone().unwrap();
        let mean = y.iter().sum::<f64>() / 40.0;
        let fit = fit_null_model(&data, Family::Gaussian).unwrap();
        assert!(fit.fitted_means.iter().all(|m| (m - mean).abs() < 1e-12));

        let binary: Vec<f64> = (0..40).map(|i| f64::from(i % 5 == 0)).collect();
        let data = data.with_phenotype(binary).unwrap();
        let fit = fit_null_model(&data, Family::Bernoulli).unwrap();
        assert!(fit.converged);
        assert!(fit.fitted_means.iter().all(|m| (m - 0.2).abs() < 1e-12));
    }

    #[test]
    fn gaussian_slope_matches_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 60;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = xs.iter().map(|x| 1.0 + 2.0 * x + rng.gen::<f64>() * 0.1).collect();
        let data = random_dataset(n, 2, 3)
            .with_phenotype(y.clone())
            .unwrap()
            .with_covariates(DMatrix::from_column_slice(n, 1, &xs))
            .unwrap();
        let fit = fit_null_model(&data, Family::Gaussian).unwrap();
        let (mx, my) = (xs.iter().sum::<f64>() / n as f64, y.iter().sum::<f64>() / n as f64);
        let sxy: f64 = xs.iter().zip(&y).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let slope = sxy / sxx;
        assert!((fit.coefficients[1] - slope).abs() < 1e-10);
        assert!((fit.coefficients[0] - (my - slope * mx)).abs() < 1e-10);
    }

    #[test]
    fn intercept_only_correlations_equal_genotype_correlations() {
        let data = random_dataset(200, 6, 4);
        let fit = fit_null_model(&data, Family::Gaussian).unwrap();
        let stats = score_statistics(&data, &fit).unwrap();
        let g = crate::corrmat::pearson_complete(&data.dense_complete().unwrap(), &data.marker_ids).unwrap();
        let diff = (stats.t_corr.values() - g.values()).amax();
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn statistics_ignore_phenotype_scale() {
        let data = random_dataset(80, 4, 5);
        let stats = |d: &GenotypeDataset| score_statistics(d, &fit_null_model(d, Family::Gaussian).unwrap()).unwrap().t;
        let t1 = stats(&data);
        let scaled: Vec<f64> = data.phenotype.as_ref().unwrap().iter().map(|v| v * 37.5).collect();
        let t2 = stats(&data.clone().with_phenotype(scaled).unwrap());
        for (a, b) in t1.iter().zip(&t2) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn monomorphic_marker_is_excluded() {
        let n = 30;
        let mut calls = Vec::new();
        for i in 0..n {
            calls.push(Some((i % 3) as u8));
            calls.push(Some(1));
        }
        let y = (0..n).map(|i| (i as f64).sin()).collect();
        let data = GenotypeDataset::new(n, 2, calls).unwrap().with_phenotype(y).unwrap();
        let (_, stats) = score_test(&data, Family::Gaussian, MissingGenotypes::MeanImpute).unwrap();
        assert_eq!(stats.marker_ids, vec!["m1"]);
        assert_eq!(stats.excluded, vec!["m2"]);
    }

    #[test]
    fn collinear_covariate_is_named() {
        let n = 20;
        let c: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut cov = DMatrix::from_element(n, 3, 1.0);
        for i in 0..n {
            cov[(i, 1)] = c[i];
            cov[(i, 2)] = 2.0 * c[i] - 1.0;
        }
        let data = random_dataset(n, 1, 6).with_covariates(cov).unwrap();
        match fit_null_model(&data, Family::Gaussian) {
            Err(Error::RankDeficient(msg)) => assert!(msg.contains('3'), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn perfect_separation_is_reported() {
        let n = 20;
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| f64::from(v >= 10.0)).collect();
        let data = random_dataset(n, 1, 7)
            .with_phenotype(y)
            .unwrap()
            .with_covariates(DMatrix::from_column_slice(n, 1, &x))
            .unwrap();
        assert!(matches!(fit_null_model(&data, Family::Bernoulli), Err(Error::Separation)));
    }

    #[test]
    fn logistic_fit_satisfies_score_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 300;
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let y: Vec<f64> = x.iter().map(|&v| f64::from(rng.gen::<f64>() < logistic(0.3 + v))).collect();
        let data = random_dataset(n, 3, 9)
            .with_phenotype(y.clone())
            .unwrap()
            .with_covariates(DMatrix::from_column_slice(n, 1, &x))
            .unwrap();
        let fit = fit_null_model(&data, Family::Bernoulli).unwrap();
        let r: Vec<f64> = y.iter().zip(&fit.fitted_means).map(|(a, b)| a - b).collect();
        assert!(r.iter().sum::<f64>().abs() < 1e-8);
        assert!(r.iter().zip(&x).map(|(r, x)| r * x).sum::<f64>().abs() < 1e-8);
        let stats = score_statistics(&data, &fit).unwrap();
        assert!(stats.t.iter().all(|t| t.abs() < 5.0));
    }

    #[test]
    fn pvalue_examples() {
        let stats = ScoreStatistics {
            marker_ids: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            excluded: vec![],
            u: vec![0.0; 4],
            v_diag: vec![1.0; 4],
            t: vec![0.0, 1.959_964, -1.959_964, 3.890],
            t_corr: CorrelationMatrix::identity(4),
        };
        let p = marker_pvalues(&stats);
        assert_eq!(p[0], 1.0);
        assert!((p[1] - 0.05).abs() < 1e-7 && (p[2] - 0.05).abs() < 1e-7);
        assert!((p[3] - 1.0e-4).abs() < 1e-6);
        assert_eq!(significant(&stats, 1e-3), vec![false, false, false, true]);
    }
}
