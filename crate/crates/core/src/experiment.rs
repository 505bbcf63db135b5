//! Built-in experiments comparing Meff estimators on structured correlation
//! matrices, and the report they produce.

use std::io::Write;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrmat::{CorrelationMatrix, StructureKind, StructuredSpec};
use crate::error::{Error, Result};
use crate::fwer::{self, CorrSource, MethodSettings, SolveOptions};
use crate::meff::{alpha_loc_from_meff, Correction, GaoConfig, MeffMethod, MeffResult};
use crate::mvn::QmcConfig;

/// Seed used when neither the command line nor the environment gives one.
pub const DEFAULT_SEED: u64 = 20_240_101;
/// Environment variable holding the default seed.
pub const SEED_ENV: &str = "MEFF_SEED";

/// The seed from `MEFF_SEED`, or [`DEFAULT_SEED`].
pub fn default_seed() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StructureSpec {
    Structured(StructuredSpec),
    /// `count` independent copies of one block.
    Blocks { block: StructuredSpec, count: usize },
    Matrix { label: String, matrix: CorrelationMatrix },
}

impl StructureSpec {
    pub fn label(&self) -> String {
        match self {
            StructureSpec::Structured(s) => s.kind.label().to_owned(),
            StructureSpec::Blocks { block, .. } => format!("{}-blocks", block.kind.label()),
            StructureSpec::Matrix { label, .. } => label.clone(),
        }
    }

    pub fn rho(&self) -> Option<f64> {
        match self {
            StructureSpec::Structured(s) | StructureSpec::Blocks { block: s, .. } => {
                (s.kind != StructureKind::Identity).then_some(s.rho)
            }
            StructureSpec::Matrix { .. } => None,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            StructureSpec::Structured(s) => s.dim,
            StructureSpec::Blocks { block, count } => block.dim * count,
            StructureSpec::Matrix { matrix, .. } => matrix.dim(),
        }
    }

    pub fn source(&self) -> Result<CorrSource> {
        Ok(match self {
            StructureSpec::Structured(s) => CorrSource::Structured(*s),
            StructureSpec::Blocks { block, count } => {
                CorrSource::Matrix(CorrelationMatrix::block_diagonal(&vec![block.build()?; *count])?)
            }
            StructureSpec::Matrix { matrix, .. } => CorrSource::Matrix(matrix.clone()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Estimators see the whole matrix.
    Full,
    /// Eigenvalue estimators are applied per block and the counts summed.
    BlockWise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub structures: Vec<StructureSpec>,
    pub methods: Vec<MeffMethod>,
    pub alpha: f64,
    pub qmc: QmcConfig,
    /// Root-solver tolerance in FWER units.
    pub solve_tol: f64,
    pub gao: GaoConfig,
    pub aggregation: Aggregation,
    /// Also report the FWER each method's local level delivers.
    pub evaluate_fwer: bool,
}

const TABLE_DIM: usize = 1000;
const CS_RHOS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
const AR1_RHOS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
const TRID_RHOS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

fn structured(kind: StructureKind, rhos: &[f64]) -> Result<Vec<StructureSpec>> {
    rhos.iter().map(|&r| Ok(StructureSpec::Structured(StructuredSpec::new(kind, r, TABLE_DIM)?))).collect()
}

fn table_structures(trid: &[f64]) -> Result<Vec<StructureSpec>> {
    let mut s = structured(StructureKind::CompoundSymmetry, &CS_RHOS)?;
    s.extend(structured(StructureKind::Ar1, &AR1_RHOS)?);
    s.extend(structured(StructureKind::Tridiagonal, trid)?);
    Ok(s)
}

/// Names accepted by [`ExperimentSpec::builtin`].
pub const BUILTIN: [&str; 5] = ["table1", "table2", "table3", "table4", "synthetic-top"];

impl ExperimentSpec {
    fn base(name: &str, structures: Vec<StructureSpec>, methods: Vec<MeffMethod>, seed: u64) -> Self {
        Self {
            name: name.to_owned(),
            structures,
            methods,
            alpha: 0.05,
            qmc: QmcConfig::default().with_seed(seed),
            solve_tol: 1e-5,
            gao: GaoConfig::default(),
            aggregation: Aggregation::Full,
            evaluate_fwer: false,
        }
    }

    /// Local levels on CS, AR1 and tridiagonal matrices of 1000 markers,
    /// including the level that holds the FWER exactly at α.
    pub fn table1(seed: u64) -> Result<Self> {
        use MeffMethod::*;
        Ok(Self::base("table1", table_structures(&TRID_RHOS)?, vec![Exact, Cheverud, Galwey, LiJi, Gao, Order2], seed))
    }

    /// FWER delivered by each estimator on the same structures.
    pub fn table2(seed: u64) -> Result<Self> {
        use MeffMethod::*;
        let mut spec = Self::base("table2", table_structures(&TRID_RHOS)?, vec![Cheverud, Galwey, LiJi, Gao, Order2], seed);
        spec.qmc = spec.qmc.with_abs_tol(1e-4);
        spec.evaluate_fwer = true;
        Ok(spec)
    }

    fn cs_blocks(name: &str, seed: u64, aggregation: Aggregation, methods: Vec<MeffMethod>) -> Result<Self> {
        let block = StructuredSpec::compound_symmetry(0.7, 10)?;
        let mut spec = Self::base(name, vec![StructureSpec::Blocks { block, count: 100 }], methods, seed);
        spec.aggregation = aggregation;
        spec.evaluate_fwer = true;
        Ok(spec)
    }

    /// 100 independent CS(0.7) blocks of 10 markers, block-wise estimates.
    pub fn table3(seed: u64) -> Result<Self> {
        use MeffMethod::*;
        Self::cs_blocks("table3", seed, Aggregation::BlockWise, vec![Cheverud, Galwey, LiJi, Gao])
    }

    /// The same matrix, estimators applied to the full matrix.
    pub fn table4(seed: u64) -> Result<Self> {
        use MeffMethod::*;
        Self::cs_blocks("table4", seed, Aggregation::Full, vec![Cheverud, Galwey, LiJi, Gao, Order2, Exact])
    }

    /// A 1000-marker matrix with linkage-like decay: adjacent correlations
    /// drawn from U(0.2, 0.95) and r_ij the product along the chain.
    pub fn synthetic_top(seed: u64) -> Result<Self> {
        use MeffMethod::*;
        let matrix = synthetic_ld_matrix(TABLE_DIM, seed)?;
        let mut spec = Self::base(
            "synthetic-top",
            vec![StructureSpec::Matrix { label: "synthetic-ld".into(), matrix }],
            vec![Cheverud, Nyholt, Galwey, LiJi, Gao, Order2, Exact],
            seed,
        );
        spec.evaluate_fwer = true;
        Ok(spec)
    }

    pub fn builtin(name: &str, seed: u64) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "table1" => Self::table1(seed),
            "table2" => Self::table2(seed),
            "table3" => Self::table3(seed),
            "table4" => Self::table4(seed),
            "synthetic-top" | "synthetic_top" => Self::synthetic_top(seed),
            other => Err(Error::InvalidParameter(format!(
                "unknown experiment '{other}'; expected one of {}",
                BUILTIN.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidParameter("an experiment needs at least one method".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        self.qmc.validate()?;
        self.gao.validate()
    }

    fn settings(&self) -> MethodSettings {
        MethodSettings {
            alpha: self.alpha,
            gao: self.gao,
            correction: Correction::Sidak,
            solve: SolveOptions { tol: self.solve_tol, qmc: self.qmc, ..SolveOptions::default() },
        }
    }
}

/// Correlation of a non-stationary first-order Markov chain.
pub fn synthetic_ld_matrix(dim: usize, seed: u64) -> Result<CorrelationMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adjacent: Vec<f64> = (1..dim).map(|_| rng.gen_range(0.2..0.95)).collect();
    let mut values = nalgebra::DMatrix::identity(dim, dim);
    for i in 0..dim {
        let mut r = 1.0;
        for j in i + 1..dim {
            r *= adjacent[j - 1];
            values[(i, j)] = r;
            values[(j, i)] = r;
        }
    }
    CorrelationMatrix::new(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub structure: String,
    pub rho: Option<f64>,
    pub dim: usize,
    pub method: MeffMethod,
    pub meff: Option<f64>,
    pub alpha_loc: Option<f64>,
    pub fwer: Option<f64>,
    pub fwer_error: Option<f64>,
    pub status: CellStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    /// Computed, but an integration hit its point budget before its tolerance.
    Unconverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub experiment: String,
    pub alpha: f64,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub rows: Vec<ReportRow>,
}

impl TableReport {
    pub fn row(&self, structure: &str, rho: Option<f64>, method: MeffMethod) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.structure == structure && r.rho == rho && r.method == method)
    }
}

/// Runs every (structure, method) cell. Cell failures are recorded in the
/// report and do not stop the run.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<TableReport> {
    spec.validate()?;
    let cells: Vec<(usize, MeffMethod)> =
        (0..spec.structures.len()).flat_map(|s| spec.methods.iter().map(move |&m| (s, m))).collect();
    let sources: Vec<Result<CorrSource>> = spec.structures.iter().map(StructureSpec::source).collect();
    let rows = cells
        .par_iter()
        .map(|&(s, method)| {
            let structure = &spec.structures[s];
            let mut row = ReportRow {
                structure: structure.label(),
                rho: structure.rho(),
                dim: structure.dim(),
                method,
                meff: None,
                alpha_loc: None,
                fwer: None,
                fwer_error: None,
                status: CellStatus::Ok,
                reason: None,
            };
            let outcome = sources[s]
                .as_ref()
                .map_err(|e| Error::Data(e.to_string()))
                .and_then(|src| run_cell(spec, structure, src, method));
            match outcome {
                Ok(cell) => {
                    row.meff = Some(cell.result.meff);
                    row.alpha_loc = Some(cell.result.alpha_loc);
                    row.fwer = cell.fwer;
                    row.fwer_error = cell.fwer_error;
                    if !cell.converged {
                        row.status = CellStatus::Unconverged;
                    }
                }
                Err(e) => {
                    row.status = CellStatus::Failed;
                    row.reason = Some(e.to_string());
                }
            }
            info!("{} {:?} {}: {:?}", row.structure, row.rho, method, row.status);
            row
        })
        .collect();
    Ok(TableReport {
        experiment: spec.name.clone(),
        alpha: spec.alpha,
        seed: spec.qmc.seed,
        aggregation: spec.aggregation,
        rows,
    })
}

struct Cell {
    result: MeffResult,
    fwer: Option<f64>,
    fwer_error: Option<f64>,
    converged: bool,
}

fn run_cell(spec: &ExperimentSpec, structure: &StructureSpec, src: &CorrSource, method: MeffMethod) -> Result<Cell> {
    let settings = spec.settings();
    let result = match (spec.aggregation, structure) {
        (Aggregation::BlockWise, StructureSpec::Blocks { block, count }) => {
            if !method.is_eigen_based() {
                return Err(Error::InvalidParameter(format!("block-wise sums need an eigenvalue estimator, not {method}")));
            }
            let per_block = fwer::estimate_meff(method, &CorrSource::Structured(*block), &settings)?;
            let total = per_block.meff * *count as f64;
            MeffResult::from_meff(method, total, spec.alpha, Correction::Sidak)?
                .with_param("per_block_meff", per_block.meff)
        }
        (Aggregation::BlockWise, _) => {
            return Err(Error::InvalidParameter("block-wise aggregation needs a block structure".into()))
        }
        (Aggregation::Full, _) => fwer::estimate_meff(method, src, &settings)?,
    };
    let mut converged = true;
    let (mut fwer, mut fwer_error) = (None, None);
    if spec.evaluate_fwer {
        // Fresh random numbers, so the solved levels are checked independently.
        let qmc = spec.qmc.with_seed(spec.qmc.seed.wrapping_add(1));
        let est = fwer::evaluate_method_fwer(src, &result, fwer::exact_engine(src), qmc)?;
        converged &= est.converged;
        fwer = Some(est.value);
        fwer_error = Some(est.abs_error);
    }
    if let Some(serde_json::Value::Bool(false)) = result.params.get("converged") {
        converged = false;
    }
    Ok(Cell { result, fwer, fwer_error, converged })
}

/// Plain decimal with at least `sig` significant digits.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i64;
    if !(-5..=15).contains(&mag) {
        return format!("{:.*e}", sig - 1, x);
    }
    let decimals = (sig as i64 - 1 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

pub const CSV_COLUMNS: [&str; 10] =
    ["structure", "rho", "dim", "method", "meff", "alpha_loc_e5", "fwer", "fwer_error", "status", "reason"];

/// CSV with local levels scaled by 1e5.
pub fn write_csv(report: &TableReport, w: &mut impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS)?;
    let opt = |v: Option<f64>| v.map(|v| format_sig(v, 7)).unwrap_or_default();
    for r in &report.rows {
        out.write_record([
            r.structure.clone(),
            r.rho.map(|v| v.to_string()).unwrap_or_default(),
            r.dim.to_string(),
            r.method.label().to_owned(),
            opt(r.meff),
            opt(r.alpha_loc.map(|a| a * 1e5)),
            opt(r.fwer),
            r.fwer_error.map(|v| format!("{v:.3e}")).unwrap_or_default(),
            serde_json::to_value(r.status)?.as_str().unwrap_or_default().to_owned(),
            r.reason.clone().unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json(report: &TableReport, w: &mut impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, report)?;
    writeln!(w)?;
    Ok(())
}

/// Local level from a Meff supplied by the caller.
pub fn external_result(meff: f64, alpha: f64) -> Result<MeffResult> {
    let alpha_loc = alpha_loc_from_meff(meff, alpha, Correction::Sidak)?;
    Ok(MeffResult { method: MeffMethod::External, meff, alpha, alpha_loc, correction: Correction::Sidak, params: Default::default() })
}
