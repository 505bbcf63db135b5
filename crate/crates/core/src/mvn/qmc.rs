//! Rectangle probabilities P(−u < T < u) for T ~ N(0, R) by randomized
//! quasi-Monte Carlo.
//!
//! The integral is transformed by sequential conditioning: with R = LLᵀ,
//! variable k given the earlier ones is normal with mean Σ_{j<k} L_kj y_j and
//! standard deviation L_kk, so the probability becomes the unit-cube integral
//! of Π_k e_k(w) where e_k is the conditional interval probability and
//! w drives the inverse-CDF sampling of y. Variables are ordered during the
//! factorization by smallest expected conditional probability first. The
//! cube is integrated with randomly shifted rank-1 lattice rules; the spread
//! over shifts gives the error estimate.
//!
//! In high dimension the conditioning integrand keeps a large variance
//! however the variables are ordered, so the exceedance probability is
//! estimated instead with an importance sampler that conditions on one
//! exceedance at a time (see [`ExceedanceSampler`]).

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrmat::CorrelationMatrix;
use crate::error::{Error, Result};
use crate::mvn::lattice::{KorobovLattice, KOROBOV_TABLE};
use crate::mvn::normal;

/// Entries below this magnitude are dropped from the sparse factor rows.
const DROP_TOL: f64 = 1e-14;
/// Residual variance below this is treated as a failed pivot.
const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QmcConfig {
    /// Target absolute error (three standard errors over the shifts).
    pub abs_tol: f64,
    /// Cap on the total number of integrand evaluations.
    pub max_points: u64,
    pub n_shifts: usize,
    pub seed: u64,
    /// Smallest-probability-first variable ordering.
    pub reorder: bool,
    pub method: QmcMethod,
}

impl Default for QmcConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-7,
            max_points: 2_000_000,
            n_shifts: 12,
            seed: 0x5eed,
            reorder: true,
            method: QmcMethod::Auto,
        }
    }
}

impl QmcConfig {
    /// Default tolerance for a given dimension: 1e-9 up to m = 100, else 1e-7.
    pub fn for_dim(dim: usize) -> Self {
        let abs_tol = if dim <= 100 { 1e-9 } else { 1e-7 };
        Self { abs_tol, ..Self::default() }
    }

    pub fn with_abs_tol(mut self, abs_tol: f64) -> Self {
        self.abs_tol = abs_tol;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_points(mut self, max_points: u64) -> Self {
        self.max_points = max_points;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0) {
            return Err(Error::InvalidParameter(format!("abs_tol {} must be positive", self.abs_tol)));
        }
        if self.n_shifts < 2 {
            return Err(Error::InvalidParameter("need at least 2 random shifts".into()));
        }
        Ok(())
    }
}

/// Probability estimate with its error bound and integration metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MvnEstimate {
    pub value: f64,
    /// Three standard errors of the shift-to-shift spread.
    pub abs_error: f64,
    /// Integrand evaluations used.
    pub n_points: u64,
    pub n_shifts: usize,
    pub seed: u64,
    pub converged: bool,
}

impl MvnEstimate {
    /// An exactly known probability.
    pub fn exact(value: f64) -> Self {
        Self { value, abs_error: 0.0, n_points: 0, n_shifts: 0, seed: 0, converged: true }
    }

    /// The complementary probability 1 − value with the same error.
    pub fn complement(self) -> Self {
        Self { value: 1.0 - self.value, ..self }
    }
}

/// The symmetric rectangle ∩_i {|T_i| < upper_i}.
#[derive(Debug, Clone, PartialEq)]
pub struct RectangleSpec {
    pub corr: CorrelationMatrix,
    pub upper: Vec<f64>,
}

impl RectangleSpec {
    /// Common bound d in every coordinate.
    pub fn symmetric(corr: CorrelationMatrix, d: f64) -> Result<Self> {
        let upper = vec![d; corr.dim()];
        Self::new(corr, upper)
    }

    /// Bound d = Φ⁻¹(1 − α_loc/2), so that each marginal event has
    /// probability 1 − α_loc.
    pub fn from_alpha_loc(corr: CorrelationMatrix, alpha_loc: f64) -> Result<Self> {
        if !(alpha_loc > 0.0 && alpha_loc < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha_loc {alpha_loc} must lie in (0, 1)")));
        }
        Self::symmetric(corr, normal::two_sided_critical(alpha_loc))
    }

    pub fn new(corr: CorrelationMatrix, upper: Vec<f64>) -> Result<Self> {
        if upper.len() != corr.dim() {
            return Err(Error::InvalidParameter("bound vector length does not match dimension".into()));
        }
        if let Some(u) = upper.iter().find(|u| !(**u > 0.0) || u.is_nan()) {
            return Err(Error::InvalidParameter(format!("rectangle bound {u} must be positive")));
        }
        Ok(Self { corr, upper })
    }

    pub fn dim(&self) -> usize {
        self.upper.len()
    }
}

// ---------------------------------------------------------------------------
// Factorization with variable ordering
// ---------------------------------------------------------------------------

/// Strictly lower-triangular rows in skyline form: row k keeps the band
/// from its first entry above the drop tolerance up to column k − 1.
#[derive(Debug, Clone, Default)]
struct Skyline {
    first: Vec<usize>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl Skyline {
    fn from_rows<I: IntoIterator<Item = Vec<f64>>>(rows: I) -> Self {
        let mut out = Skyline { offsets: vec![0], ..Default::default() };
        for row in rows {
            let first = row.iter().position(|v| v.abs() >= DROP_TOL).unwrap_or(row.len());
            out.first.push(first);
            out.values.extend_from_slice(&row[first..]);
            out.offsets.push(out.values.len());
        }
        out
    }

    fn stored(&self) -> usize {
        self.values.len()
    }

    #[inline]
    fn dot(&self, k: usize, x: &[f64]) -> f64 {
        let band = &self.values[self.offsets[k]..self.offsets[k + 1]];
        band.iter().zip(&x[self.first[k]..k]).map(|(a, b)| a * b).sum()
    }
}

/// How conditional means are formed from earlier variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MeanForm {
    /// Σ L_kj y_j over standardized innovations.
    Innovations,
    /// Σ B_kj x_j over sampled values, B = I − D L⁻¹.
    Regression,
}

/// The transformed integrand, ready for evaluation.
#[derive(Debug, Clone)]
pub struct ConditionedIntegrand {
    /// Original index of each position.
    order: Vec<usize>,
    /// Conditional standard deviations L_kk.
    sd: Vec<f64>,
    upper: Vec<f64>,
    rows: Skyline,
    form: MeanForm,
}

impl ConditionedIntegrand {
    pub fn new(spec: &RectangleSpec, reorder: bool) -> Result<Self> {
        let m = spec.dim();
        let c = spec.corr.values();
        // Working copies in the permuted order.
        let mut cov: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| c[(i, j)]).collect()).collect();
        let mut upper = spec.upper.clone();
        let mut order: Vec<usize> = (0..m).collect();
        let mut l = vec![vec![0.0; m]; m];
        let mut expected = vec![0.0; m];

        for k in 0..m {
            if reorder && k + 1 < m {
                let mut best: Option<(f64, usize, usize)> = None;
                for i in k..m {
                    let ss: f64 = l[i][..k].iter().map(|v| v * v).sum();
                    let var = cov[i][i] - ss;
                    if var <= PIVOT_TOL {
                        continue;
                    }
                    let sd = var.sqrt();
                    let mean: f64 = l[i][..k].iter().zip(&expected[..k]).map(|(a, b)| a * b).sum();
                    let p = normal::interval((-upper[i] - mean) / sd, (upper[i] - mean) / sd);
                    let better = match best {
                        None => true,
                        Some((bp, bo, _)) => p < bp || (p == bp && order[i] < bo),
                    };
                    if better {
                        best = Some((p, order[i], i));
                    }
                }
                if let Some((_, _, i)) = best {
                    if i != k {
                        cov.swap(i, k);
                        for row in cov.iter_mut() {
                            row.swap(i, k);
                        }
                        l.swap(i, k);
                        upper.swap(i, k);
                        order.swap(i, k);
                    }
                }
            }
            let ss: f64 = l[k][..k].iter().map(|v| v * v).sum();
            let var = cov[k][k] - ss;
            if var <= PIVOT_TOL {
                return Err(Error::NotPositiveDefinite { pivot: order[k] + 1, residual: var });
            }
            let lkk = var.sqrt();
            l[k][k] = lkk;
            for i in k + 1..m {
                let s: f64 = l[i][..k].iter().zip(&l[k][..k]).map(|(a, b)| a * b).sum();
                l[i][k] = (cov[i][k] - s) / lkk;
            }
            let mean: f64 = l[k][..k].iter().zip(&expected[..k]).map(|(a, b)| a * b).sum();
            let lo = (-upper[k] - mean) / lkk;
            let hi = (upper[k] - mean) / lkk;
            let mass = normal::interval(lo, hi);
            expected[k] = if mass > 0.0 { (normal::pdf(lo) - normal::pdf(hi)) / mass } else { 0.0 };
        }

        let sd: Vec<f64> = (0..m).map(|k| l[k][k]).collect();
        let innovations = Skyline::from_rows((0..m).map(|k| l[k][..k].to_vec()));
        let nnz_l = innovations.stored();

        let (rows, form) = if nnz_l > 4 * m {
            let regression = regression_rows(&l);
            let nnz_b = regression.stored();
            if nnz_b < nnz_l {
                (regression, MeanForm::Regression)
            } else {
                (innovations, MeanForm::Innovations)
            }
        } else {
            (innovations, MeanForm::Innovations)
        };
        Ok(Self { order, sd, upper, rows, form })
    }

    pub fn dim(&self) -> usize {
        self.sd.len()
    }

    /// Variable order chosen by the factorization (original indices).
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Stored off-diagonal coefficients, a measure of evaluation cost.
    pub fn nnz(&self) -> usize {
        self.rows.stored()
    }

    #[inline]
    fn mean(&self, k: usize, ys: &[f64], xs: &[f64]) -> f64 {
        match self.form {
            MeanForm::Innovations => self.rows.dot(k, ys),
            MeanForm::Regression => self.rows.dot(k, xs),
        }
    }

    /// Π_k e_k(w) for w in the unit cube of dimension m − 1. `buf` must hold
    /// 2m values and is overwritten.
    pub fn eval(&self, w: &[f64], buf: &mut [f64]) -> f64 {
        let m = self.dim();
        let (ys, xs) = buf.split_at_mut(m);
        let mut f = 1.0;
        for k in 0..m {
            let mean = self.mean(k, ys, xs);
            let sd = self.sd[k];
            let lo = (-self.upper[k] - mean) / sd;
            let hi = (self.upper[k] - mean) / sd;
            let (e, y) = if k + 1 < m {
                sample_interval(lo, hi, w[k])
            } else {
                (normal::interval(lo, hi), 0.0)
            };
            f *= e;
            if f == 0.0 {
                return 0.0;
            }
            ys[k] = y;
            xs[k] = mean + sd * y;
        }
        f
    }
}

impl ConditionedIntegrand {
    /// Maps independent standard normals to a draw of the unconstrained
    /// vector: `buf[..m]` receives the innovations and `buf[m..]` the values,
    /// both in factorization order.
    pub fn sample(&self, normals: &[f64], buf: &mut [f64]) {
        let m = self.dim();
        let (ys, xs) = buf.split_at_mut(m);
        ys.copy_from_slice(&normals[..m]);
        let sky = &self.rows;
        match self.form {
            MeanForm::Innovations => {
                for k in 0..m {
                    xs[k] = sky.dot(k, ys) + self.sd[k] * ys[k];
                }
            }
            MeanForm::Regression => {
                for k in 0..m {
                    let band = &sky.values[sky.offsets[k]..sky.offsets[k + 1]];
                    let earlier = &xs[sky.first[k]..k];
                    let mean = match band.len() {
                        0 => 0.0,
                        1 => band[0] * earlier[0],
                        _ => band.iter().zip(earlier).map(|(a, b)| a * b).sum(),
                    };
                    xs[k] = mean + self.sd[k] * ys[k];
                }
            }
        }
    }
}

/// Interval probability e = Φ(hi) − Φ(lo) and the truncated-normal draw
/// Φ⁻¹(Φ(lo) + w·e), both evaluated in the tail that keeps precision.
#[inline]
fn sample_interval(lo: f64, hi: f64, w: f64) -> (f64, f64) {
    if lo >= hi {
        return (0.0, lo);
    }
    let (e, y) = if lo > 0.0 {
        let s_lo = normal::sf(lo);
        let e = s_lo - normal::sf(hi);
        (e, -normal::quantile_fast(s_lo - w * e))
    } else if hi < 0.0 {
        let c_lo = normal::cdf(lo);
        let e = normal::cdf(hi) - c_lo;
        (e, normal::quantile_fast(c_lo + w * e))
    } else {
        let c_lo = normal::cdf(lo);
        let e = 1.0 - c_lo - normal::sf(hi);
        (e, normal::quantile_fast(c_lo + w * e))
    };
    (e.max(0.0), y.clamp(lo, hi))
}

/// Rows of B = I − D L⁻¹, the regression of each variable on the earlier
/// ones in the chosen order.
fn regression_rows(l: &[Vec<f64>]) -> Skyline {
    let m = l.len();
    // Column-by-column forward substitution for L⁻¹ (lower triangular).
    let mut inv = vec![vec![0.0; m]; m];
    for col in 0..m {
        inv[col][col] = 1.0 / l[col][col];
        for i in col + 1..m {
            let s: f64 = (col..i).map(|j| l[i][j] * inv[j][col]).sum();
            inv[i][col] = -s / l[i][i];
        }
    }
    Skyline::from_rows((0..m).map(|k| (0..k).map(|j| -l[k][k] * inv[k][j]).collect()))
}

// ---------------------------------------------------------------------------
// Exceedance-conditioned sampling
// ---------------------------------------------------------------------------

/// Importance sampler for the exceedance probability 1 − P.
///
/// With A_k = {|T_k| ≥ u_k} and S = Σ P(A_k), drawing k with probability
/// P(A_k)/S and then T from its law given A_k makes S / N(T) unbiased for
/// P(∪A_k), where N counts the exceedances in T. N ≥ 1 always, so the
/// estimate never exceeds S and its spread stays small when exceedances
/// are rare, which is where conditioning-based integrands struggle in
/// high dimension.
#[derive(Debug, Clone)]
pub struct ExceedanceSampler {
    generator: ConditionedIntegrand,
    /// Principal-component factor (columns √λ_i v_i, largest first), used
    /// instead of the Cholesky factor when that one is dense.
    principal: Option<DMatrix<f64>>,
    corr: CorrelationMatrix,
    /// Cumulative P(A_k)/S.
    cumulative: Vec<f64>,
    tails: Vec<f64>,
    total: f64,
    /// Markers conditioned on per shape draw, spaced systematically over
    /// the selection law so the O(m²) draw is shared by several O(m) terms.
    reuse: usize,
}

impl ExceedanceSampler {
    pub fn new(spec: &RectangleSpec) -> Result<Self> {
        let generator = ConditionedIntegrand::new(spec, false)?;
        let m = generator.dim();
        let principal = (generator.nnz() > m * m / 4).then(|| principal_factor(&spec.corr));
        let draw_cost = if principal.is_some() { m * m } else { generator.nnz() };
        let reuse = (draw_cost / (4 * m)).clamp(1, MAX_REUSE);
        let mut sampler = Self {
            generator,
            principal,
            corr: spec.corr.clone(),
            cumulative: Vec::new(),
            tails: Vec::new(),
            total: 0.0,
            reuse,
        };
        sampler.set_bounds(&spec.upper)?;
        Ok(sampler)
    }

    /// Replaces the rectangle bounds, keeping the factorization.
    pub fn set_bounds(&mut self, upper: &[f64]) -> Result<()> {
        if upper.len() != self.dim() {
            return Err(Error::InvalidParameter("bound vector length does not match dimension".into()));
        }
        if let Some(u) = upper.iter().find(|u| !(**u > 0.0)) {
            return Err(Error::InvalidParameter(format!("rectangle bound {u} must be positive")));
        }
        self.generator.upper = upper.to_vec();
        self.tails = upper.iter().map(|&u| 2.0 * normal::sf(u)).collect();
        self.total = self.tails.iter().sum();
        let mut acc = 0.0;
        self.cumulative = self
            .tails
            .iter()
            .map(|t| {
                acc += t;
                acc / self.total
            })
            .collect();
        Ok(())
    }

    /// Bonferroni sum S = Σ P(|T_k| ≥ u_k), the largest value the estimator
    /// can take.
    pub fn bonferroni_sum(&self) -> f64 {
        self.total
    }

    pub fn dim(&self) -> usize {
        self.generator.dim()
    }

    /// S times the mean of 1/N over one shifted lattice. The two lattice
    /// coordinates stratify the marker choice and the tail position; the
    /// remaining coordinates are padded with pseudo-random normals, each
    /// vector used together with its negation.
    fn batch(&self, lattice: &KorobovLattice, shift: &[f64], padding_seed: u64) -> f64 {
        let m = self.dim();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(padding_seed);
        let mut sum = 0.0;
        match &self.principal {
            Some(f) => {
                let mut z = DMatrix::zeros(m, DRAW_BATCH);
                let mut x = DMatrix::zeros(m, DRAW_BATCH);
                let mut heads: Vec<[f64; 2]> = Vec::with_capacity(DRAW_BATCH);
                let drain = |z: &DMatrix<f64>, x: &mut DMatrix<f64>, heads: &mut Vec<[f64; 2]>| -> f64 {
                    x.gemm(1.0, f, z, 0.0);
                    let s = heads.iter().enumerate().map(|(c, h)| self.score(x.column(c).as_slice(), h[0], h[1])).sum();
                    heads.clear();
                    s
                };
                lattice.for_each_point(shift, |p| {
                    fill_normals(p, z.column_mut(heads.len()).as_mut_slice(), &mut rng);
                    heads.push([p[0], p[1]]);
                    if heads.len() == DRAW_BATCH {
                        sum += drain(&z, &mut x, &mut heads);
                    }
                });
                if !heads.is_empty() {
                    sum += drain(&z, &mut x, &mut heads);
                }
            }
            None => {
                let mut normals = vec![0.0; m];
                let mut buf = vec![0.0; 2 * m];
                lattice.for_each_point(shift, |p| {
                    fill_normals(p, &mut normals, &mut rng);
                    self.generator.sample(&normals, &mut buf);
                    sum += self.score(&buf[m..], p[0], p[1]);
                });
            }
        }
        self.total * sum / lattice.n_points() as f64
    }

    /// Average of 1/N over the conditioned draws built from the shape draw
    /// `xs`; `u0` and `u1` place the (marker, tail) pairs.
    fn score(&self, xs: &[f64], u0: f64, u1: f64) -> f64 {
        let upper = &self.generator.upper;
        let mut point = 0.0;
        for j in 0..self.reuse {
            let k = self.pick((u0 + j as f64 / self.reuse as f64).fract());
            let v = (u1 + j as f64 * GOLDEN).fract();
            let (sign, t) = if v < 0.5 { (-1.0, 2.0 * v) } else { (1.0, 2.0 * v - 1.0) };
            let target = sign * normal::isf((t * 0.5 * self.tails[k]).max(f64::MIN_POSITIVE));
            let column = self.corr.values().column(k);
            let column = column.as_slice();
            for flip in [1.0, -1.0] {
                let lift = target - flip * xs[k];
                let count: usize = xs
                    .iter()
                    .zip(column)
                    .zip(upper)
                    .map(|((&x, &r), &u)| ((flip * x + r * lift).abs() >= u) as usize)
                    .sum();
                // Marker k sits exactly on its drawn value; count it once
                // whatever rounding did to flip·x_k + r_kk·lift.
                let at_k = ((flip * xs[k] + column[k] * lift).abs() >= upper[k]) as usize;
                point += 0.5 / (count - at_k + 1) as f64;
            }
        }
        point / self.reuse as f64
    }

    fn pick(&self, u: f64) -> usize {
        self.cumulative.partition_point(|&c| c <= u).min(self.dim() - 1)
    }
}

// ---------------------------------------------------------------------------
// Integration driver
// ---------------------------------------------------------------------------

/// Which integrand the lattice rule is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QmcMethod {
    /// Conditioning up to [`CONDITIONING_MAX_DIM`], exceedance sampling above.
    #[default]
    Auto,
    /// Sequential conditioning with variable reordering.
    Conditioning,
    /// Exceedance-conditioned importance sampling.
    Exceedance,
}

/// Largest dimension for which `Auto` uses the conditioning integrand.
pub const CONDITIONING_MAX_DIM: usize = 12;

impl QmcMethod {
    fn resolve(self, dim: usize) -> Self {
        match self {
            QmcMethod::Auto if dim <= CONDITIONING_MAX_DIM => QmcMethod::Conditioning,
            QmcMethod::Auto => QmcMethod::Exceedance,
            other => other,
        }
    }
}

/// P(|T_i| < upper_i for all i) by randomized lattice QMC.
///
/// Lattice sizes double until three standard errors fall below `abs_tol`;
/// levels are combined by inverse-variance weighting. Running out of
/// `max_points` returns the best estimate with `converged = false`.
pub fn mvn_rectangle_qmc(spec: &RectangleSpec, cfg: &QmcConfig) -> Result<MvnEstimate> {
    Ok(mvn_exceedance_qmc(spec, cfg)?.complement())
}

/// 1 − P(|T_i| < upper_i for all i), the familywise error probability,
/// with the same error bound as [`mvn_rectangle_qmc`].
pub fn mvn_exceedance_qmc(spec: &RectangleSpec, cfg: &QmcConfig) -> Result<MvnEstimate> {
    cfg.validate()?;
    match cfg.method.resolve(spec.dim()) {
        QmcMethod::Exceedance if spec.dim() > 1 => {
            let sampler = ExceedanceSampler::new(spec)?;
            integrate_exceedance(&sampler, cfg)
        }
        _ => {
            let integrand = ConditionedIntegrand::new(spec, cfg.reorder)?;
            Ok(integrate(&integrand, cfg)?.complement())
        }
    }
}

/// Integrates a prepared conditioning integrand, estimating P.
pub fn integrate(integrand: &ConditionedIntegrand, cfg: &QmcConfig) -> Result<MvnEstimate> {
    cfg.validate()?;
    let m = integrand.dim();
    if m == 1 {
        let u = integrand.upper[0] / integrand.sd[0];
        return Ok(MvnEstimate { seed: cfg.seed, ..MvnEstimate::exact(normal::interval(-u, u)) });
    }
    let dim = m - 1;
    drive(cfg, dim, 2, |lattice, shift, _| {
        let mut buf = vec![0.0; 2 * m];
        let mut mirrored = vec![0.0; dim];
        let mut sum = 0.0;
        lattice.for_each_point(shift, |p| {
            for (q, &v) in mirrored.iter_mut().zip(p) {
                *q = 1.0 - v;
            }
            sum += 0.5 * (integrand.eval(p, &mut buf) + integrand.eval(&mirrored, &mut buf));
        });
        sum / lattice.n_points() as f64
    })
}

/// Integrates the exceedance estimator, estimating 1 − P.
/// Standard normals for one shape draw: lattice coordinates beyond the
/// first two drive the leading entries, the rest come from `rng`.
fn fill_normals(p: &[f64], normals: &mut [f64], rng: &mut Xoshiro256PlusPlus) {
    let lead = p.len() - 2;
    for (i, z) in normals.iter_mut().enumerate() {
        *z = if i < lead { normal::quantile_fast(p[2 + i].clamp(1e-300, 1.0 - 1e-16)) } else { rng.sample(StandardNormal) };
    }
}

/// Leading principal components driven by lattice coordinates.
const MAX_REUSE: usize = 4;
/// Shape draws multiplied by a dense factor together.
const DRAW_BATCH: usize = 64;
const GOLDEN: f64 = 0.618_033_988_749_894_9;
const PRINCIPAL_LATTICE_DIMS: usize = 16;

fn principal_factor(corr: &CorrelationMatrix) -> DMatrix<f64> {
    let eig = corr.values().clone().symmetric_eigen();
    let m = corr.dim();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    DMatrix::from_fn(m, m, |i, c| {
        let j = order[c];
        eig.eigenvectors[(i, j)] * eig.eigenvalues[j].max(0.0).sqrt()
    })
}

pub fn integrate_exceedance(sampler: &ExceedanceSampler, cfg: &QmcConfig) -> Result<MvnEstimate> {
    cfg.validate()?;
    if sampler.bonferroni_sum() == 0.0 {
        return Ok(MvnEstimate { seed: cfg.seed, ..MvnEstimate::exact(0.0) });
    }
    let lead = if sampler.principal.is_some() { PRINCIPAL_LATTICE_DIMS.min(sampler.dim()) } else { 0 };
    drive(cfg, 2 + lead, 1, |lattice, shift, rng| sampler.batch(lattice, shift, rng.gen()))
}

/// Shared level-doubling loop. `batch` returns one shift's mean over the
/// lattice; each shift draws its shift vector and any padding randomness
/// from its own stream so results do not depend on scheduling.
fn drive<F>(cfg: &QmcConfig, dim: usize, evals_per_point: u64, batch: F) -> Result<MvnEstimate>
where
    F: Fn(&KorobovLattice, &[f64], &mut ChaCha8Rng) -> f64 + Sync,
{
    let mut n_points = 0u64;
    let mut weight_sum = 0.0;
    let mut weighted_value = 0.0;
    let mut value = 0.0;
    let mut variance = f64::INFINITY;

    for level in 0..KOROBOV_TABLE.len() {
        let lattice = KorobovLattice::level(level, dim);
        let cost = evals_per_point * lattice.n_points() * cfg.n_shifts as u64;
        if level > 0 && n_points + cost > cfg.max_points {
            break;
        }
        let means: Vec<f64> = (0..cfg.n_shifts)
            .into_par_iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream((level * 4096 + s) as u64);
                let shift: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
                batch(&lattice, &shift, &mut rng)
            })
            .collect();
        n_points += cost;

        let ns = means.len() as f64;
        let level_mean = means.iter().sum::<f64>() / ns;
        let level_var = means.iter().map(|v| (v - level_mean).powi(2)).sum::<f64>() / (ns * (ns - 1.0));
        if level_var <= 0.0 {
            value = level_mean;
            variance = 0.0;
            break;
        }
        weight_sum += 1.0 / level_var;
        weighted_value += level_mean / level_var;
        value = weighted_value / weight_sum;
        variance = 1.0 / weight_sum;
        if 3.0 * variance.sqrt() <= cfg.abs_tol {
            break;
        }
    }
    let abs_error = 3.0 * variance.sqrt();
    Ok(MvnEstimate {
        value: value.clamp(0.0, 1.0),
        abs_error,
        n_points,
        n_shifts: cfg.n_shifts,
        seed: cfg.seed,
        converged: abs_error <= cfg.abs_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrmat::StructuredSpec;
    use nalgebra::DMatrix;

    #[test]
    fn univariate_is_exact() {
        let spec = RectangleSpec::symmetric(CorrelationMatrix::identity(1), 1.959_963_984_540_054).unwrap();
        let est = mvn_rectangle_qmc(&spec, &QmcConfig::default()).unwrap();
        assert!((est.value - 0.95).abs() < 1e-15);
        assert!(est.converged);
    }

    #[test]
    fn independent_pair_is_product() {
        let d = 1.5;
        let spec = RectangleSpec::symmetric(CorrelationMatrix::identity(2), d).unwrap();
        let est = mvn_rectangle_qmc(&spec, &QmcConfig::default()).unwrap();
        let p = normal::interval(-d, d);
        assert!((est.value - p * p).abs() < 1e-14);
    }

    #[test]
    fn factorization_reports_failed_pivot() {
        let mut v = DMatrix::identity(3, 3);
        v[(0, 2)] = 1.0;
        v[(2, 0)] = 1.0;
        let corr = CorrelationMatrix::new(v).unwrap();
        let spec = RectangleSpec::symmetric(corr, 2.0).unwrap();
        match mvn_rectangle_qmc(&spec, &QmcConfig { reorder: false, ..Default::default() }) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn banded_structures_get_sparse_rows() {
        let m = 200;
        for spec in [StructuredSpec::ar1(0.9, m).unwrap(), StructuredSpec::tridiagonal(0.5, m).unwrap()] {
            let corr = spec.build().unwrap();
            let rect = RectangleSpec::symmetric(corr, 4.0).unwrap();
            let plain = ConditionedIntegrand::new(&rect, false).unwrap();
            assert!(plain.nnz() <= 2 * m, "{:?}: {}", spec.kind, plain.nnz());
        }
    }

    #[test]
    fn same_seed_same_value() {
        let corr = StructuredSpec::compound_symmetry(0.3, 8).unwrap().build().unwrap();
        let spec = RectangleSpec::symmetric(corr, 2.2).unwrap();
        let cfg = QmcConfig { abs_tol: 1e-6, seed: 42, ..Default::default() };
        let a = mvn_rectangle_qmc(&spec, &cfg).unwrap();
        let b = mvn_rectangle_qmc(&spec, &cfg).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a, b);
    }

    #[test]
    fn dense_exceedance_matches_closed_form() {
        let (m, rho) = (40, 0.5);
        let d = normal::two_sided_critical(1e-3);
        let corr = StructuredSpec::compound_symmetry(rho, m).unwrap().build().unwrap();
        let sampler = ExceedanceSampler::new(&RectangleSpec::symmetric(corr, d).unwrap()).unwrap();
        assert!(sampler.principal.is_some());
        assert_eq!(sampler.reuse, MAX_REUSE);
        let est = integrate_exceedance(&sampler, &QmcConfig::default().with_abs_tol(1e-6).with_max_points(400_000)).unwrap();
        let exact = crate::mvn::cs_exact::cs_exceedance_exact(m, rho, d).unwrap();
        assert!((est.value - exact).abs() <= est.abs_error.max(1e-7), "{est:?} vs {exact}");
    }

    #[test]
    fn config_validation() {
        assert!(QmcConfig { n_shifts: 1, ..Default::default() }.validate().is_err());
        assert!(QmcConfig { abs_tol: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!(QmcConfig::for_dim(100).abs_tol, 1e-9);
        assert_eq!(QmcConfig::for_dim(1000).abs_tol, 1e-7);
    }
}
