//! Familywise error rate at a given local level, inversion of FWER(α_loc) = α,
//! and composition over independent blocks.
//!
//! All tests share the two-sided cutoff d = Φ⁻¹(1 − α_loc/2) and
//! FWER = 1 − P(|T_1| < d, …, |T_m| < d) under the complete null.

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::corrmat::{CorrelationMatrix, StructureKind, StructuredSpec};
use crate::error::{Error, Result};
use crate::meff::{self, Correction, GaoConfig, MeffMethod, MeffResult};
use crate::mvn::qmc::{integrate_exceedance, mvn_exceedance_qmc, QmcMethod, CONDITIONING_MAX_DIM};
use crate::mvn::{cs_exceedance_exact, normal, order2, ExceedanceSampler, MvnEstimate, QmcConfig, RectangleSpec};

/// Error reported for the closed-form paths, which integrate to ~1e-13.
const CLOSED_FORM_ERROR: f64 = 1e-12;
/// Off-diagonal entries below this are treated as zero when looking for
/// independent compound-symmetry blocks.
const ZERO_TOL: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FwerMethod {
    /// One-dimensional integral; compound symmetry (or independent blocks of
    /// it) with non-negative correlation only.
    Exact,
    /// Randomized lattice integration of the full joint probability.
    Qmc,
    /// Product of consecutive bivariate terms.
    Order2,
}

impl FwerMethod {
    pub fn label(self) -> &'static str {
        match self {
            FwerMethod::Exact => "exact",
            FwerMethod::Qmc => "qmc",
            FwerMethod::Order2 => "order2",
        }
    }
}

impl std::fmt::Display for FwerMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for FwerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "exact" | "closedform" => Ok(FwerMethod::Exact),
            "qmc" => Ok(FwerMethod::Qmc),
            "order2" => Ok(FwerMethod::Order2),
            other => Err(Error::InvalidParameter(format!("unknown FWER method '{other}'"))),
        }
    }
}

/// A correlation structure given either by its parameters or as a matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum CorrSource {
    Structured(StructuredSpec),
    Matrix(CorrelationMatrix),
}

impl From<StructuredSpec> for CorrSource {
    fn from(s: StructuredSpec) -> Self {
        CorrSource::Structured(s)
    }
}

impl From<CorrelationMatrix> for CorrSource {
    fn from(m: CorrelationMatrix) -> Self {
        CorrSource::Matrix(m)
    }
}

impl CorrSource {
    pub fn dim(&self) -> usize {
        match self {
            CorrSource::Structured(s) => s.dim,
            CorrSource::Matrix(m) => m.dim(),
        }
    }

    pub fn matrix(&self) -> Result<CorrelationMatrix> {
        match self {
            CorrSource::Structured(s) => s.build(),
            CorrSource::Matrix(m) => Ok(m.clone()),
        }
    }

    /// Correlations between consecutive markers in input order.
    pub fn consecutive(&self) -> Vec<f64> {
        match self {
            CorrSource::Structured(s) => (1..s.dim).map(|i| s.entry(i - 1, i)).collect(),
            CorrSource::Matrix(m) => m.consecutive(),
        }
    }

    /// Independent compound-symmetry blocks as (size, ρ) → count, when the
    /// structure has that form with ρ ≥ 0.
    pub fn cs_blocks(&self) -> Option<BTreeMap<(usize, u64), usize>> {
        let mut blocks = BTreeMap::new();
        match self {
            CorrSource::Structured(s) => {
                let rho = match s.kind {
                    StructureKind::CompoundSymmetry => s.rho,
                    StructureKind::Identity => 0.0,
                    _ if s.rho == 0.0 => 0.0,
                    _ => return None,
                };
                if rho < 0.0 {
                    return None;
                }
                blocks.insert((s.dim, rho.to_bits()), 1);
            }
            CorrSource::Matrix(m) => {
                for component in components(m) {
                    let rho = common_correlation(m, &component)?;
                    if rho < 0.0 {
                        return None;
                    }
                    *blocks.entry((component.len(), rho.to_bits())).or_insert(0) += 1;
                }
            }
        }
        Some(blocks)
    }
}

/// Connected components of the graph with an edge wherever |r_ij| > 0.
fn components(m: &CorrelationMatrix) -> Vec<Vec<usize>> {
    let n = m.dim();
    let v = m.values();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            for j in 0..n {
                if !seen[j] && v[(i, j)].abs() > ZERO_TOL {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// The common off-diagonal value of a principal submatrix, if there is one.
fn common_correlation(m: &CorrelationMatrix, idx: &[usize]) -> Option<f64> {
    if idx.len() < 2 {
        return Some(0.0);
    }
    let rho = m.get(idx[0], idx[1]);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            if (m.get(i, j) - rho).abs() > 1e-12 {
                return None;
            }
        }
    }
    Some(rho)
}

/// FWER of one correlation structure at a given local level.
#[derive(Debug, Clone)]
pub struct FwerQuery {
    pub corr: CorrSource,
    pub alpha_loc: f64,
    pub method: FwerMethod,
    pub qmc: QmcConfig,
}

impl FwerQuery {
    pub fn new(corr: impl Into<CorrSource>, alpha_loc: f64, method: FwerMethod) -> Self {
        let corr = corr.into();
        let qmc = QmcConfig::for_dim(corr.dim());
        Self { corr, alpha_loc, method, qmc }
    }

    pub fn with_qmc(mut self, qmc: QmcConfig) -> Self {
        self.qmc = qmc;
        self
    }
}

/// FWER = 1 − P(∩|T_j| < d) with the error bound of the joint probability.
pub fn fwer_at(query: &FwerQuery) -> Result<MvnEstimate> {
    FwerEvaluator::new(&query.corr, query.method, query.qmc)?.eval(query.alpha_loc)
}

enum Engine {
    Exact(BTreeMap<(usize, u64), usize>),
    Order2(Vec<f64>),
    Small(CorrelationMatrix),
    Sampler(Box<ExceedanceSampler>),
}

/// Reusable FWER(α_loc) evaluator: factorizations and structure checks are
/// done once, so repeated calls at different levels are cheap and, for the
/// QMC engine, use common random numbers.
pub struct FwerEvaluator {
    engine: Engine,
    qmc: QmcConfig,
    dim: usize,
}

impl FwerEvaluator {
    pub fn new(corr: &CorrSource, method: FwerMethod, qmc: QmcConfig) -> Result<Self> {
        qmc.validate()?;
        let dim = corr.dim();
        let engine = match method {
            FwerMethod::Exact => Engine::Exact(corr.cs_blocks().ok_or_else(|| {
                Error::InvalidParameter(
                    "the closed form needs compound symmetry with rho >= 0 (or independent blocks of it); \
                     use the qmc method"
                        .into(),
                )
            })?),
            FwerMethod::Order2 => {
                let consecutive = corr.consecutive();
                if let Some(j) = consecutive.iter().position(|r| !(r.abs() < 1.0)) {
                    return Err(Error::InvalidParameter(format!(
                        "order-2 approximation needs |r| < 1 between markers {} and {}",
                        j + 1,
                        j + 2
                    )));
                }
                Engine::Order2(consecutive)
            }
            FwerMethod::Qmc => {
                let matrix = corr.matrix()?;
                let small = match qmc.method {
                    QmcMethod::Conditioning => true,
                    QmcMethod::Exceedance => dim < 2,
                    QmcMethod::Auto => dim <= CONDITIONING_MAX_DIM,
                };
                if small {
                    Engine::Small(matrix)
                } else {
                    let spec = RectangleSpec::symmetric(matrix, 1.0)?;
                    Engine::Sampler(Box::new(ExceedanceSampler::new(&spec)?))
                }
            }
        };
        Ok(Self { engine, qmc, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// FWER at `alpha_loc`.
    pub fn eval(&mut self, alpha_loc: f64) -> Result<MvnEstimate> {
        if !(alpha_loc > 0.0 && alpha_loc < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha_loc {alpha_loc} must lie in (0, 1)")));
        }
        let d = normal::two_sided_critical(alpha_loc);
        match &mut self.engine {
            Engine::Exact(blocks) => {
                let mut log_joint = 0.0;
                for (&(size, rho_bits), &count) in blocks.iter() {
                    let q = cs_exceedance_exact(size, f64::from_bits(rho_bits), d)?;
                    log_joint += count as f64 * (-q).ln_1p();
                }
                Ok(closed_form(-log_joint.exp_m1()))
            }
            Engine::Order2(consecutive) => {
                let log_joint = order2::order2_log_joint(consecutive, d)?;
                Ok(closed_form(-log_joint.exp_m1()))
            }
            Engine::Small(matrix) => {
                let spec = RectangleSpec::symmetric(matrix.clone(), d)?;
                let cfg = QmcConfig { method: QmcMethod::Conditioning, ..self.qmc };
                mvn_exceedance_qmc(&spec, &cfg)
            }
            Engine::Sampler(sampler) => {
                sampler.set_bounds(&vec![d; self.dim])?;
                integrate_exceedance(sampler, &self.qmc)
            }
        }
    }
}

fn closed_form(value: f64) -> MvnEstimate {
    MvnEstimate { abs_error: CLOSED_FORM_ERROR, ..MvnEstimate::exact(value.clamp(0.0, 1.0)) }
}

/// 1 − Π(1 − α_b) for independent blocks, summed in log space.
pub fn fwer_compose_blocks(per_block_fwers: &[f64]) -> Result<f64> {
    let mut log_joint = 0.0;
    for &a in per_block_fwers {
        if !(0.0..1.0).contains(&a) {
            return Err(Error::InvalidParameter(format!("block FWER {a} must lie in [0, 1)")));
        }
        log_joint += (-a).ln_1p();
    }
    Ok(-log_joint.exp_m1())
}

/// The FWER a method's local level actually delivers on `corr`.
pub fn evaluate_method_fwer(
    corr: &CorrSource,
    result: &MeffResult,
    method: FwerMethod,
    qmc: QmcConfig,
) -> Result<MvnEstimate> {
    FwerEvaluator::new(corr, method, qmc)?.eval(result.alpha_loc)
}

// ---------------------------------------------------------------------------
// Root solving
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Target accuracy in FWER units.
    pub tol: f64,
    /// Integration settings; `abs_tol` is replaced by tol/10.
    pub qmc: QmcConfig,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-5, qmc: QmcConfig::default(), max_iter: 100 }
    }
}

impl SolveOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_qmc(mut self, qmc: QmcConfig) -> Self {
        self.qmc = qmc;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub alpha_loc: f64,
    pub achieved_fwer: f64,
    /// Error bound of the FWER evaluation at the solution.
    pub fwer_error: f64,
    /// FWER evaluations performed.
    pub iterations: usize,
    /// Final interval known to contain the root.
    pub bracket: [f64; 2],
    /// log(1 − α)/log(1 − α_loc).
    pub meff_equivalent: f64,
    /// Solution within tol and every evaluation met its integration tolerance.
    pub converged: bool,
}

impl SolveResult {
    pub fn to_meff_result(&self, method: MeffMethod, alpha: f64) -> Result<MeffResult> {
        Ok(MeffResult::from_alpha_loc(method, self.alpha_loc, alpha)?
            .with_param("achieved_fwer", self.achieved_fwer)
            .with_param("fwer_error", self.fwer_error)
            .with_param("iterations", self.iterations)
            .with_param("converged", self.converged))
    }
}

struct Probe {
    x: f64,
    f: f64,
    err: f64,
    converged: bool,
}

/// Tracks evaluations in log(α_loc) and enforces monotonicity.
struct Objective<'a> {
    eval: &'a mut FwerEvaluator,
    alpha: f64,
    probes: Vec<Probe>,
}

impl Objective<'_> {
    fn at(&mut self, x: f64) -> Result<(f64, f64)> {
        let est = self.eval.eval(x.exp())?;
        let f = est.value - self.alpha;
        debug!("alpha_loc {:.6e}: fwer {:.6e} ± {:.1e}", x.exp(), est.value, est.abs_error);
        for p in &self.probes {
            let (x_lo, f_lo, e_lo, x_hi, f_hi, e_hi) = if p.x < x {
                (p.x, p.f, p.err, x, f, est.abs_error)
            } else {
                (x, f, est.abs_error, p.x, p.f, p.err)
            };
            if x_lo < x_hi && f_lo - f_hi > e_lo + e_hi + 1e-12 {
                return Err(Error::NonMonotone {
                    lo: x_lo.exp(),
                    f_lo: f_lo + self.alpha,
                    hi: x_hi.exp(),
                    f_hi: f_hi + self.alpha,
                });
            }
        }
        self.probes.push(Probe { x, f, err: est.abs_error, converged: est.converged });
        Ok((f, est.abs_error))
    }
}

/// Solves FWER(α_loc) = α over [α/m, α].
///
/// FWER is increasing in α_loc, below α at α/m (Bonferroni) and at least α at
/// α. For the QMC engine every evaluation reuses the same random numbers, so
/// the estimated curve is a fixed function and the bracket is only accepted
/// once both ends differ from the target by more than their error bounds.
pub fn solve_alpha_loc(
    corr: &CorrSource,
    alpha: f64,
    method: FwerMethod,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} must lie in (0, 1)")));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {} must be positive", opts.tol)));
    }
    let m = corr.dim();
    if m == 1 {
        return Ok(SolveResult {
            alpha_loc: alpha,
            achieved_fwer: alpha,
            fwer_error: 0.0,
            iterations: 0,
            bracket: [alpha, alpha],
            meff_equivalent: 1.0,
            converged: true,
        });
    }
    let qmc = QmcConfig { abs_tol: opts.tol / 10.0, ..opts.qmc };
    let mut evaluator = FwerEvaluator::new(corr, method, qmc)?;
    let mut obj = Objective { eval: &mut evaluator, alpha, probes: Vec::new() };

    let x_min = (alpha / m as f64).ln();
    let x_max = alpha.ln();
    let (a, fa, b, fb) = match method {
        FwerMethod::Qmc => bracket_from_guess(&mut obj, corr, alpha, x_min, x_max)?,
        _ => {
            let (fa, _) = obj.at(x_min)?;
            let (fb, _) = obj.at(x_max)?;
            (x_min, fa, x_max, fb)
        }
    };
    let (x, lo, hi) = brent(&mut obj, a, fa, b, fb, opts.tol, opts.max_iter)?;
    let best = obj
        .probes
        .iter()
        .find(|p| p.x == x)
        .ok_or_else(|| Error::NoConvergence("solver lost its final iterate".into()))?;
    let alpha_loc = x.exp();
    Ok(SolveResult {
        alpha_loc,
        achieved_fwer: best.f + alpha,
        fwer_error: best.err,
        iterations: obj.probes.len(),
        bracket: [lo.exp(), hi.exp()],
        meff_equivalent: meff::meff_from_alpha(alpha_loc, alpha)?,
        converged: best.f.abs() <= opts.tol && obj.probes.iter().all(|p| p.converged),
    })
}

/// Starts from the order-2 solution (or Šidák when that is unavailable) and
/// steps outward until the sign change is beyond the noise.
fn bracket_from_guess(
    obj: &mut Objective<'_>,
    corr: &CorrSource,
    alpha: f64,
    x_min: f64,
    x_max: f64,
) -> Result<(f64, f64, f64, f64)> {
    let m = corr.dim() as f64;
    let sidak = -((-alpha).ln_1p() / m).exp_m1();
    let guess = solve_alpha_loc(corr, alpha, FwerMethod::Order2, &SolveOptions::default().with_tol(1e-9))
        .map(|r| r.alpha_loc)
        .unwrap_or(sidak);
    let mut x = guess.ln().clamp(x_min, x_max);
    let (mut f, mut err) = obj.at(x)?;
    let mut step = 0.02;
    loop {
        if f.abs() > err {
            // FWER is roughly proportional to α_loc, so the log-gap is a
            // good step; overshoot a little to land on the other side.
            let gap = ((f + alpha) / alpha).ln().abs().max(step);
            let dir = if f > 0.0 { -1.0 } else { 1.0 };
            let x_next = (x + dir * 1.25 * gap).clamp(x_min, x_max);
            let (f_next, err_next) = obj.at(x_next)?;
            if f_next.signum() != f.signum() && f_next.abs() > err_next {
                return Ok(if x < x_next { (x, f, x_next, f_next) } else { (x_next, f_next, x, f) });
            }
            if (x_next == x_min || x_next == x_max) && f_next.signum() == f.signum() {
                return Err(Error::NoConvergence(format!(
                    "FWER stays on one side of {alpha} across the bracket [alpha/m, alpha]"
                )));
            }
            if f_next.signum() == f.signum() && f_next.abs() > err_next {
                x = x_next;
                f = f_next;
                err = err_next;
                step *= 2.0;
                continue;
            }
            // The far point is within noise of the target: look past it.
            step = (step * 2.0).max(gap * 2.0);
            let x_far = (x + dir * 1.25 * step).clamp(x_min, x_max);
            let (f_far, _) = obj.at(x_far)?;
            if f_far.signum() != f.signum() {
                return Ok(if x < x_far { (x, f, x_far, f_far) } else { (x_far, f_far, x, f) });
            }
            x = x_far;
            f = f_far;
            continue;
        }
        // The guess itself is within noise: widen symmetrically.
        let lo = (x - step).max(x_min);
        let hi = (x + step).min(x_max);
        let (f_lo, e_lo) = obj.at(lo)?;
        let (f_hi, e_hi) = obj.at(hi)?;
        if f_lo < -e_lo && f_hi > e_hi {
            return Ok((lo, f_lo, hi, f_hi));
        }
        if lo == x_min && hi == x_max {
            return Ok((lo, f_lo, hi, f_hi));
        }
        step *= 4.0;
        err = 0.0;
        f = if f_lo.abs() > f_hi.abs() { f_lo } else { f_hi };
        x = if f_lo.abs() > f_hi.abs() { lo } else { hi };
    }
}

/// Brent's method on a bracket with fa ≤ 0 ≤ fb (in either order). Returns
/// the best iterate and the final bracket.
fn brent(
    obj: &mut Objective<'_>,
    mut a: f64,
    mut fa: f64,
    mut b: f64,
    mut fb: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, f64, f64)> {
    if fa.signum() == fb.signum() && fa != 0.0 && fb != 0.0 {
        return Err(Error::NoConvergence(format!(
            "no sign change of FWER − alpha between {:.4e} and {:.4e}",
            a.exp(),
            b.exp()
        )));
    }
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.abs() <= tol {
            break;
        }
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let xtol = 2.0 * f64::EPSILON * b.abs() + 1e-13;
        let half = 0.5 * (c - b);
        if half.abs() <= xtol {
            break;
        }
        if e.abs() >= xtol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q) = if a == c {
                (2.0 * half * s, 1.0 - s)
            } else {
                let q = fa / fc;
                let r = fb / fc;
                (s * (2.0 * half * q * (q - r) - (b - a) * (r - 1.0)), (q - 1.0) * (r - 1.0) * (s - 1.0))
            };
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * half * q - (xtol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = half;
                e = d;
            }
        } else {
            d = half;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > xtol { d } else { xtol.copysign(half) };
        fb = obj.at(b)?.0;
    }
    let (lo, hi) = if b < c { (b, c) } else { (c, b) };
    Ok((b, lo, hi))
}

// ---------------------------------------------------------------------------
// Method dispatch
// ---------------------------------------------------------------------------

/// Settings for computing any method's correction on one structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodSettings {
    pub alpha: f64,
    pub gao: GaoConfig,
    pub correction: Correction,
    pub solve: SolveOptions,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self { alpha: 0.05, gao: GaoConfig::default(), correction: Correction::Sidak, solve: SolveOptions::default() }
    }
}

/// The engine used for the exact joint probability: the closed form when it
/// applies, QMC otherwise.
pub fn exact_engine(corr: &CorrSource) -> FwerMethod {
    if corr.cs_blocks().is_some() {
        FwerMethod::Exact
    } else {
        FwerMethod::Qmc
    }
}

/// Meff and local level for any method. Eigen-based estimators use the
/// spectrum; Order2 and Exact are root-solved.
pub fn estimate_meff(method: MeffMethod, corr: &CorrSource, settings: &MethodSettings) -> Result<MeffResult> {
    match method {
        MeffMethod::Order2 => {
            solve_alpha_loc(corr, settings.alpha, FwerMethod::Order2, &settings.solve)?
                .to_meff_result(method, settings.alpha)
        }
        MeffMethod::Exact => {
            let engine = exact_engine(corr);
            Ok(solve_alpha_loc(corr, settings.alpha, engine, &settings.solve)?
                .to_meff_result(method, settings.alpha)?
                .with_param("engine", engine.label()))
        }
        MeffMethod::External => Err(Error::InvalidParameter("external Meff must be supplied by the caller".into())),
        _ => match corr {
            CorrSource::Structured(s) if settings.gao.block_size.is_none() => meff::estimate_on_spectrum(
                method,
                &s.eigen_spectrum()?,
                &settings.gao,
                settings.alpha,
                settings.correction,
            ),
            _ => meff::estimate(method, &corr.matrix()?, &settings.gao, settings.alpha, settings.correction),
        },
    }
}
