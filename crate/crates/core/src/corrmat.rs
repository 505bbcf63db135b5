//! Correlation matrices: structured families, estimation from genotypes,
//! eigen-spectra and the clean-up steps applied before estimating Meff.

use std::ops::Range;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::GenotypeDataset;
use crate::error::{Error, Result};

/// Asymmetry tolerated on construction; the stored matrix is symmetrized.
const SYMMETRY_TOL: f64 = 1e-10;
/// |r| within this distance of 1 counts as perfect linkage disequilibrium.
pub const PERFECT_LD_TOL: f64 = 1e-12;
/// A clamped eigenvalue below `-LARGE_NEGATIVE_FRACTION * m` raises a warning.
pub const LARGE_NEGATIVE_FRACTION: f64 = 0.05;

/// Dense symmetric matrix with unit diagonal and entries in [-1, 1].
///
/// Positive semidefiniteness is not enforced: matrices estimated from
/// pairwise-complete data may have small negative eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    values: DMatrix<f64>,
}

impl CorrelationMatrix {
    pub fn new(mut values: DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = values.shape();
        if rows != cols {
            return Err(Error::InvalidCorrelation(format!("matrix is {rows}x{cols}, not square")));
        }
        if rows == 0 {
            return Err(Error::InvalidCorrelation("matrix is empty".into()));
        }
        check_symmetric(&values)?;
        for i in 0..rows {
            let d = values[(i, i)];
            if !d.is_finite() || (d - 1.0).abs() > SYMMETRY_TOL {
                return Err(Error::InvalidCorrelation(format!(
                    "diagonal entry {} is {d}, expected 1",
                    i + 1
                )));
            }
            values[(i, i)] = 1.0;
            for j in 0..i {
                let v = 0.5 * (values[(i, j)] + values[(j, i)]);
                if !v.is_finite() || v.abs() > 1.0 + SYMMETRY_TOL {
                    return Err(Error::InvalidCorrelation(format!(
                        "entry ({}, {}) = {v} is outside [-1, 1]",
                        i + 1,
                        j + 1
                    )));
                }
                let v = v.clamp(-1.0, 1.0);
                values[(i, j)] = v;
                values[(j, i)] = v;
            }
        }
        Ok(Self { values })
    }

    pub fn identity(dim: usize) -> Self {
        Self { values: DMatrix::identity(dim, dim) }
    }

    /// Block-diagonal composition; blocks are independent of each other.
    pub fn block_diagonal(blocks: &[CorrelationMatrix]) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidParameter("no blocks given".into()));
        }
        let dim = blocks.iter().map(CorrelationMatrix::dim).sum();
        let mut values = DMatrix::zeros(dim, dim);
        let mut offset = 0;
        for b in blocks {
            let k = b.dim();
            values.view_mut((offset, offset), (k, k)).copy_from(&b.values);
            offset += k;
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Principal submatrix on the given indices, in the given order.
    pub fn submatrix(&self, indices: &[usize]) -> Self {
        let values = DMatrix::from_fn(indices.len(), indices.len(), |a, b| {
            self.values[(indices[a], indices[b])]
        });
        Self { values }
    }

    /// Principal submatrix on a contiguous range.
    pub fn block(&self, range: Range<usize>) -> Self {
        let k = range.len();
        Self { values: self.values.view((range.start, range.start), (k, k)).into_owned() }
    }

    /// Correlations between consecutive markers, r(j, j+1).
    pub fn consecutive(&self) -> Vec<f64> {
        (1..self.dim()).map(|j| self.values[(j - 1, j)]).collect()
    }

    pub fn eigen_spectrum(&self) -> EigenSpectrum {
        let lambdas = sorted_eigenvalues(self.values.clone());
        EigenSpectrum::from_eigenvalues(lambdas)
    }
}

fn check_symmetric(values: &DMatrix<f64>) -> Result<()> {
    let n = values.nrows();
    for i in 0..n {
        for j in 0..i {
            let diff = (values[(i, j)] - values[(j, i)]).abs();
            if diff > SYMMETRY_TOL || diff.is_nan() {
                return Err(Error::NotSymmetric { row: i + 1, col: j + 1, diff });
            }
        }
    }
    Ok(())
}

fn sorted_eigenvalues(values: DMatrix<f64>) -> Vec<f64> {
    let mut lambdas: Vec<f64> = values.symmetric_eigenvalues().iter().copied().collect();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    lambdas
}

/// Eigenvalues of the symmetric tridiagonal matrix with diagonal `diag` and
/// off-diagonal `off`, by Sturm-sequence bisection.
fn tridiagonal_eigenvalues(diag: &[f64], off: &[f64]) -> Vec<f64> {
    let m = diag.len();
    let radius = |i: usize| {
        (if i > 0 { off[i - 1].abs() } else { 0.0 }) + (if i + 1 < m { off[i].abs() } else { 0.0 })
    };
    let lo = (0..m).map(|i| diag[i] - radius(i)).fold(f64::INFINITY, f64::min);
    let hi = (0..m).map(|i| diag[i] + radius(i)).fold(f64::NEG_INFINITY, f64::max);
    // Number of eigenvalues below x.
    let below = |x: f64| {
        let mut count = 0;
        let mut q = 1.0;
        for i in 0..m {
            let e2 = if i > 0 { off[i - 1] * off[i - 1] } else { 0.0 };
            q = diag[i] - x - if i > 0 { e2 / q } else { 0.0 };
            if q == 0.0 {
                q = -f64::EPSILON * (diag[i].abs() + e2.sqrt() + f64::MIN_POSITIVE);
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    };
    (0..m)
        .map(|k| {
            let (mut a, mut b) = (lo, hi);
            loop {
                let mid = 0.5 * (a + b);
                if mid <= a || mid >= b {
                    return mid;
                }
                if below(mid) > k {
                    b = mid;
                } else {
                    a = mid;
                }
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Structured families
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    /// Common correlation ρ between every pair.
    CompoundSymmetry,
    /// ρ^|i−j|.
    Ar1,
    /// ρ on the first off-diagonal, zero elsewhere.
    Tridiagonal,
    Identity,
}

impl StructureKind {
    pub fn label(self) -> &'static str {
        match self {
            StructureKind::CompoundSymmetry => "cs",
            StructureKind::Ar1 => "ar1",
            StructureKind::Tridiagonal => "tridiagonal",
            StructureKind::Identity => "identity",
        }
    }
}

impl std::str::FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cs" | "compound-symmetry" | "compound_symmetry" => Ok(StructureKind::CompoundSymmetry),
            "ar1" => Ok(StructureKind::Ar1),
            "trid" | "tridiagonal" => Ok(StructureKind::Tridiagonal),
            "identity" | "independent" => Ok(StructureKind::Identity),
            other => Err(Error::InvalidParameter(format!("unknown structure '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuredSpec {
    pub kind: StructureKind,
    pub rho: f64,
    pub dim: usize,
}

impl StructuredSpec {
    pub fn new(kind: StructureKind, rho: f64, dim: usize) -> Result<Self> {
        let spec = Self { kind, rho, dim };
        spec.validate()?;
        Ok(spec)
    }

    pub fn compound_symmetry(rho: f64, dim: usize) -> Result<Self> {
        Self::new(StructureKind::CompoundSymmetry, rho, dim)
    }

    pub fn ar1(rho: f64, dim: usize) -> Result<Self> {
        Self::new(StructureKind::Ar1, rho, dim)
    }

    pub fn tridiagonal(rho: f64, dim: usize) -> Result<Self> {
        Self::new(StructureKind::Tridiagonal, rho, dim)
    }

    pub fn identity(dim: usize) -> Self {
        Self { kind: StructureKind::Identity, rho: 0.0, dim }
    }

    /// Checks the parameter range that keeps the family positive definite.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        let rho = self.rho;
        if !rho.is_finite() {
            return Err(Error::InvalidParameter(format!("rho = {rho} is not finite")));
        }
        let ok = match self.kind {
            StructureKind::Identity => true,
            StructureKind::CompoundSymmetry => {
                let lower = if self.dim > 1 { -1.0 / (self.dim as f64 - 1.0) } else { -1.0 };
                rho > lower && rho < 1.0
            }
            StructureKind::Ar1 => rho.abs() < 1.0,
            StructureKind::Tridiagonal => rho.abs() <= 0.5,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "rho = {rho} is outside the positive-definite range for {} with dimension {}",
                self.kind.label(),
                self.dim
            )))
        }
    }

    /// Entry (i, j) of the structured matrix.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        let lag = i.abs_diff(j);
        match self.kind {
            StructureKind::Identity => 0.0,
            StructureKind::CompoundSymmetry => self.rho,
            StructureKind::Ar1 => self.rho.powi(lag as i32),
            StructureKind::Tridiagonal => {
                if lag == 1 {
                    self.rho
                } else {
                    0.0
                }
            }
        }
    }

    pub fn build(&self) -> Result<CorrelationMatrix> {
        build_structured(self)
    }

    /// Eigen-spectrum without forming the matrix. AR1 uses the tridiagonal
    /// inverse, so every family costs at most O(m²).
    pub fn eigen_spectrum(&self) -> Result<EigenSpectrum> {
        self.validate()?;
        if let Some(lambdas) = self.closed_form_eigenvalues() {
            return Ok(EigenSpectrum::from_eigenvalues(lambdas));
        }
        let m = self.dim;
        if m == 1 {
            return Ok(EigenSpectrum::from_eigenvalues(vec![1.0]));
        }
        let r2 = self.rho * self.rho;
        let mut diag = vec![1.0 + r2; m];
        diag[0] = 1.0;
        diag[m - 1] = 1.0;
        let mu = tridiagonal_eigenvalues(&diag, &vec![-self.rho; m - 1]);
        Ok(EigenSpectrum::from_eigenvalues(mu.iter().map(|&u| (1.0 - r2) / u).collect()))
    }

    /// Closed-form eigenvalues where they exist (CS, identity, tridiagonal),
    /// sorted descending.
    pub fn closed_form_eigenvalues(&self) -> Option<Vec<f64>> {
        let m = self.dim;
        let mut lambdas = match self.kind {
            StructureKind::Identity => vec![1.0; m],
            StructureKind::CompoundSymmetry => {
                let mut v = vec![1.0 - self.rho; m];
                v[0] = 1.0 + (m as f64 - 1.0) * self.rho;
                v
            }
            StructureKind::Tridiagonal => (1..=m)
                .map(|k| {
                    1.0 + 2.0
                        * self.rho
                        * (k as f64 * std::f64::consts::PI / (m as f64 + 1.0)).cos()
                })
                .collect(),
            StructureKind::Ar1 => return None,
        };
        lambdas.sort_by(|a, b| b.total_cmp(a));
        Some(lambdas)
    }
}

pub fn build_structured(spec: &StructuredSpec) -> Result<CorrelationMatrix> {
    spec.validate()?;
    let values = DMatrix::from_fn(spec.dim, spec.dim, |i, j| spec.entry(i, j));
    Ok(CorrelationMatrix { values })
}

// ---------------------------------------------------------------------------
// Estimation from genotypes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    /// Any missing genotype is an error.
    #[default]
    RequireComplete,
    /// Each pair uses the samples where both markers are observed.
    PairwiseComplete,
}

/// Pearson correlation matrix of the additive genotype codes.
///
/// Columns are centred and scaled by their sample standard deviation
/// (denominator n − 1) so that R̂ = X*ᵀX*/(n − 1) has an exact unit diagonal.
pub fn estimate_from_genotypes(
    data: &GenotypeDataset,
    policy: MissingPolicy,
) -> Result<CorrelationMatrix> {
    let n = data.n_samples();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    match policy {
        MissingPolicy::RequireComplete => {
            let x = data.dense_complete()?;
            pearson_complete(&x, &data.marker_ids)
        }
        MissingPolicy::PairwiseComplete => pearson_pairwise(data),
    }
}

/// Pearson correlation of the columns of a complete data matrix.
pub fn pearson_complete(x: &DMatrix<f64>, names: &[String]) -> Result<CorrelationMatrix> {
    let (n, m) = x.shape();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mut z = x.clone();
    for (j, mut col) in z.column_iter_mut().enumerate() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let ss = col.norm_squared();
        if ss <= 0.0 {
            return Err(Error::ZeroVariance { marker: marker_name(names, j) });
        }
        col.scale_mut(((n - 1) as f64 / ss).sqrt());
    }
    let mut values = z.tr_mul(&z) / (n - 1) as f64;
    for i in 0..m {
        values[(i, i)] = 1.0;
        for j in 0..i {
            let v = (0.5 * (values[(i, j)] + values[(j, i)])).clamp(-1.0, 1.0);
            values[(i, j)] = v;
            values[(j, i)] = v;
        }
    }
    Ok(CorrelationMatrix { values })
}

fn pearson_pairwise(data: &GenotypeDataset) -> Result<CorrelationMatrix> {
    let m = data.n_markers();
    let cols: Vec<Vec<Option<f64>>> = (0..m).map(|j| data.marker_column(j).collect()).collect();
    for (j, col) in cols.iter().enumerate() {
        let observed: Vec<f64> = col.iter().flatten().copied().collect();
        if observed.len() < 2 {
            return Err(Error::TooFewSamples(observed.len()));
        }
        if observed.iter().all(|&v| v == observed[0]) {
            return Err(Error::ZeroVariance { marker: marker_name(&data.marker_ids, j) });
        }
    }
    let mut values = DMatrix::identity(m, m);
    for i in 0..m {
        for j in 0..i {
            let pairs: Vec<(f64, f64)> = cols[i]
                .iter()
                .zip(&cols[j])
                .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
                .collect();
            let r = pearson_pairs(&pairs).ok_or_else(|| {
                Error::Data(format!(
                    "markers {} and {} have no variation on their jointly observed samples",
                    marker_name(&data.marker_ids, j),
                    marker_name(&data.marker_ids, i)
                ))
            })?;
            values[(i, j)] = r;
            values[(j, i)] = r;
        }
    }
    Ok(CorrelationMatrix { values })
}

fn pearson_pairs(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let k = pairs.len() as f64;
    let (sx, sy) = pairs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / k, sy / k);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn marker_name(names: &[String], j: usize) -> String {
    names.get(j).cloned().unwrap_or_else(|| format!("#{}", j + 1))
}

// ---------------------------------------------------------------------------
// Spectra
// ---------------------------------------------------------------------------

/// Record of negative eigenvalues set to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampReport {
    pub n_clamped: usize,
    pub most_negative: f64,
    /// Set when the most negative value is below −0.05·m.
    pub large_negative: bool,
}

/// Eigenvalues of a correlation matrix, sorted descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSpectrum {
    lambdas: Vec<f64>,
    source_dim: usize,
    /// min(n − 1, m) when estimated from n samples.
    pub rank_bound: Option<usize>,
    pub clamp: Option<ClampReport>,
}

impl EigenSpectrum {
    /// Wraps eigenvalues of an m × m matrix; they are re-sorted descending.
    pub fn from_eigenvalues(mut lambdas: Vec<f64>) -> Self {
        lambdas.sort_by(|a, b| b.total_cmp(a));
        let source_dim = lambdas.len();
        Self { lambdas, source_dim, rank_bound: None, clamp: None }
    }

    pub fn with_rank_bound(mut self, n_samples: usize) -> Self {
        self.rank_bound = Some(n_samples.saturating_sub(1).min(self.source_dim));
        self
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn dim(&self) -> usize {
        self.source_dim
    }

    pub fn sum(&self) -> f64 {
        self.lambdas.iter().sum()
    }

    /// Number of eigenvalues strictly above `threshold`.
    pub fn count_above(&self, threshold: f64) -> usize {
        self.lambdas.iter().filter(|&&l| l > threshold).count()
    }

    pub fn has_negative(&self) -> bool {
        self.lambdas.last().is_some_and(|&l| l < 0.0)
    }
}

/// Eigen-spectrum of a symmetric matrix; rejects non-symmetric input.
pub fn eigen_spectrum(values: &DMatrix<f64>) -> Result<EigenSpectrum> {
    if values.nrows() != values.ncols() {
        return Err(Error::InvalidCorrelation("matrix is not square".into()));
    }
    check_symmetric(values)?;
    Ok(EigenSpectrum::from_eigenvalues(sorted_eigenvalues(values.clone())))
}

/// Sets negative eigenvalues to zero and records what was clamped.
pub fn clamp_negative_eigenvalues(spectrum: &EigenSpectrum) -> EigenSpectrum {
    let mut out = spectrum.clone();
    let negatives: Vec<f64> = spectrum.lambdas.iter().copied().filter(|&l| l < 0.0).collect();
    if negatives.is_empty() {
        return out;
    }
    let most_negative = negatives.iter().copied().fold(0.0, f64::min);
    let large_negative = most_negative < -LARGE_NEGATIVE_FRACTION * spectrum.source_dim as f64;
    if large_negative {
        warn!("clamping large negative eigenvalue {most_negative:e}; the correlation estimate is far from positive semidefinite");
    }
    for l in &mut out.lambdas {
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    out.clamp = Some(ClampReport { n_clamped: negatives.len(), most_negative, large_negative });
    out
}

/// Drops markers in perfect LD with an earlier marker. Returns the reduced
/// matrix and the kept (0-based) indices.
pub fn prune_perfect_ld(r: &CorrelationMatrix) -> (CorrelationMatrix, Vec<usize>) {
    let m = r.dim();
    let mut dropped = vec![false; m];
    let mut kept = Vec::with_capacity(m);
    for i in 0..m {
        if dropped[i] {
            continue;
        }
        kept.push(i);
        for j in i + 1..m {
            if !dropped[j] && r.get(i, j).abs() >= 1.0 - PERFECT_LD_TOL {
                dropped[j] = true;
            }
        }
    }
    (r.submatrix(&kept), kept)
}

// ---------------------------------------------------------------------------
// Block partitions
// ---------------------------------------------------------------------------

/// Disjoint contiguous index ranges covering 0..m in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    blocks: Vec<Range<usize>>,
}

impl BlockPartition {
    pub fn new(blocks: Vec<Range<usize>>, dim: usize) -> Result<Self> {
        let mut next = 0;
        for b in &blocks {
            if b.start != next || b.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "block {b:?} does not continue the partition at index {next}"
                )));
            }
            next = b.end;
        }
        if next != dim {
            return Err(Error::InvalidParameter(format!(
                "blocks cover 0..{next}, expected 0..{dim}"
            )));
        }
        Ok(Self { blocks })
    }

    /// Consecutive blocks of `size`; the last may be shorter.
    pub fn contiguous(dim: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidParameter("block size must be positive".into()));
        }
        let blocks = (0..dim).step_by(size).map(|s| s..(s + size).min(dim)).collect();
        Self::new(blocks, dim)
    }

    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let blocks = sizes
            .iter()
            .map(|&k| {
                let r = start..start + k;
                start += k;
                r
            })
            .collect();
        Self::new(blocks, start)
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}
