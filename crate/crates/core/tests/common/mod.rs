//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use meff::corrmat::CorrelationMatrix;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

/// Gauss–Legendre nodes and weights on [0, 1] from the Golub–Welsch
/// eigenproblem of the Jacobi matrix.
pub fn golub_welsch(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        let k = i.max(j) as f64;
        if i.abs_diff(j) == 1 {
            k / (4.0 * k * k - 1.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (0.5 * (eig.eigenvalues[i] + 1.0), v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// P(|X_i| < upper_i for all i), X ~ N(0, R), by nested tensor-product
/// Gauss–Legendre quadrature in the whitened coordinates, each one over its
/// conditional interval. The innermost coordinate is integrated in closed form.
pub fn tensor_rectangle(corr: &CorrelationMatrix, upper: &[f64], nodes: usize) -> f64 {
    let m = corr.dim();
    let l = corr.values().clone().cholesky().expect("positive definite").l();
    let std = Normal::new(0.0, 1.0).unwrap();
    let (x, w) = golub_welsch(nodes);
    let mut y = vec![0.0; m];
    fn level(i: usize, l: &DMatrix<f64>, upper: &[f64], y: &mut [f64], x: &[f64], w: &[f64], std: &Normal) -> f64 {
        let shift: f64 = (0..i).map(|j| l[(i, j)] * y[j]).sum();
        let lo = std.cdf((-upper[i] - shift) / l[(i, i)]);
        let hi = std.cdf((upper[i] - shift) / l[(i, i)]);
        if i + 1 == upper.len() || hi <= lo {
            return (hi - lo).max(0.0);
        }
        let (a, b) = ((-upper[i] - shift) / l[(i, i)], (upper[i] - shift) / l[(i, i)]);
        // Past ±9 the normal density is below 1e-17; trimming keeps the nodes where the mass is.
        let (a, b) = (a.max(-9.0), b.min(9.0));
        let mut acc = 0.0;
        for (&xk, &wk) in x.iter().zip(w) {
            y[i] = a + xk * (b - a);
            let density = (-0.5 * y[i] * y[i]).exp() / (2.0 * std::f64::consts::PI).sqrt();
            acc += wk * density * level(i + 1, l, upper, y, x, w, std);
        }
        (b - a) * acc
    }
    level(0, &l, upper, &mut y, &x, &w, &std)
}

/// Correlation matrix of a random factor model: loadings N(0,1) of the
/// given rank plus independent noise of the given variance.
pub fn random_factor_correlation(rng: &mut ChaCha8Rng, m: usize, rank: usize, noise: f64) -> CorrelationMatrix {
    let w: DMatrix<f64> = DMatrix::from_fn(m, rank, |_, _| StandardNormal.sample(rng));
    let mut s: DMatrix<f64> = &w * w.transpose();
    for i in 0..m {
        s[(i, i)] += noise;
    }
    let d: Vec<f64> = (0..m).map(|i| s[(i, i)].sqrt()).collect();
    let r = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { s[(i, j)] / (d[i] * d[j]) });
    CorrelationMatrix::new(r).unwrap()
}

/// Random correlation matrix from a Gram matrix of `m` Gaussian vectors in
/// `m + extra` dimensions.
pub fn random_gram_correlation(rng: &mut ChaCha8Rng, m: usize, extra: usize) -> CorrelationMatrix {
    let rank = m + extra;
    random_factor_correlation(rng, m, rank, 0.0)
}

pub fn uniform_bounds(rng: &mut ChaCha8Rng, m: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..m).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Additive genotype calls with per-marker allele frequencies in
/// [0.2, 0.5]; consecutive markers share a latent haplotype draw with
/// probability `linkage` so the columns are correlated.
pub fn random_genotypes(rng: &mut ChaCha8Rng, n: usize, m: usize, linkage: f64) -> meff::dataset::GenotypeDataset {
    let freqs: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..0.5)).collect();
    let mut calls = Vec::with_capacity(n * m);
    for _ in 0..n {
        let mut prev = [0.0f64; 2];
        for (j, &p) in freqs.iter().enumerate() {
            let mut g = 0u8;
            for h in &mut prev {
                let u = if j > 0 && rng.gen_bool(linkage) { *h } else { rng.gen::<f64>() };
                *h = u;
                g += (u < p) as u8;
            }
            calls.push(Some(g));
        }
    }
    meff::dataset::GenotypeDataset::new(n, m, calls).unwrap()
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
