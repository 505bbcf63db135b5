//! Command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::corrmat::{estimate_from_genotypes, CorrelationMatrix, MissingPolicy, StructureKind, StructuredSpec};
use crate::dataset::MissingGenotypes;
use crate::error::{Error, Result};
use crate::experiment::{self, format_sig, run_experiment, ExperimentSpec};
use crate::fwer::{self, CorrSource, FwerEvaluator, FwerMethod, MethodSettings, SolveOptions};
use crate::io::{self as fileio, GenotypeFormat};
use crate::meff::{Correction, GaoConfig, MeffMethod, MeffResult, GAO_DEFAULT_CUTOFF};
use crate::mvn::{MvnEstimate, QmcConfig};
use crate::score::{self, Family};

#[derive(Debug, Parser)]
#[command(name = "meff", version, about = "Effective number of tests and the familywise error rate it delivers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[arg(long, value_enum, default_value_t = Format::Csv, global = true)]
    format: Format,
    /// Write results here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for randomized integration (default: $MEFF_SEED or a fixed value).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Meff and local level from eigenvalue estimators (or order2/exact).
    Meff(MeffArgs),
    /// Local level at which the FWER equals alpha.
    Solve(SolveArgs),
    /// FWER delivered at a given local level.
    Fwer(FwerArgs),
    /// Score tests of single markers in a GLM.
    Score(ScoreArgs),
    /// Run a built-in experiment.
    Reproduce(ReproduceArgs),
    /// Write a structured correlation matrix.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
struct CorrArgs {
    /// Structured matrix: cs, ar1, tridiagonal or identity.
    #[arg(long)]
    structure: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    /// Markers in the structured matrix (per block with --blocks).
    #[arg(long)]
    dim: Option<usize>,
    /// Independent copies of the structured matrix along the diagonal.
    #[arg(long)]
    blocks: Option<usize>,
    /// Correlation matrix file (CSV or TSV, optional header).
    #[arg(long, conflicts_with = "structure")]
    matrix: Option<PathBuf>,
    /// Genotype file; its marker correlation matrix is used.
    #[arg(long, conflicts_with_all = ["structure", "matrix"])]
    genotypes: Option<PathBuf>,
    #[arg(long, default_value = "matrix-csv")]
    genotype_format: String,
    /// Use pairwise-complete samples for correlations with missing calls.
    #[arg(long)]
    pairwise: bool,
}

#[derive(Debug, Args)]
struct IntegrationArgs {
    /// Absolute error target of each joint-probability integration.
    #[arg(long)]
    abs_tol: Option<f64>,
    /// Cap on integrand evaluations per integration.
    #[arg(long)]
    max_points: Option<u64>,
}

#[derive(Debug, Args)]
struct MeffArgs {
    #[command(flatten)]
    corr: CorrArgs,
    /// Methods: cheverud, nyholt, gao, liji, galwey, order2, exact (repeatable, comma separated).
    #[arg(long, value_delimiter = ',')]
    method: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = GAO_DEFAULT_CUTOFF)]
    gao_cutoff: f64,
    /// Gao's method on contiguous blocks of this many markers.
    #[arg(long)]
    block_size: Option<usize>,
    /// Sum eigenvalue estimates over the --blocks copies instead of using the full matrix.
    #[arg(long, requires = "blocks")]
    block_wise: bool,
    #[arg(long, default_value = "sidak")]
    correction: String,
    #[command(flatten)]
    integration: IntegrationArgs,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[command(flatten)]
    corr: CorrArgs,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// FWER engine: exact, qmc or order2 (default: exact when available, else qmc).
    #[arg(long)]
    method: Option<String>,
    /// Solver tolerance in FWER units.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[command(flatten)]
    integration: IntegrationArgs,
}

#[derive(Debug, Args)]
struct FwerArgs {
    #[command(flatten)]
    corr: CorrArgs,
    #[arg(long, required_unless_present = "meff", conflicts_with = "meff")]
    alpha_loc: Option<f64>,
    /// Evaluate the local level Šidák-implied by this Meff at --alpha.
    #[arg(long)]
    meff: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    method: Option<String>,
    #[command(flatten)]
    integration: IntegrationArgs,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    genotypes: PathBuf,
    #[arg(long, default_value = "additive-raw")]
    genotype_format: String,
    /// Phenotype file (one value per sample); required for matrix-csv genotypes.
    #[arg(long)]
    phenotype: Option<PathBuf>,
    /// Covariate file, one row per sample; an intercept is added if missing.
    #[arg(long)]
    covariates: Option<PathBuf>,
    #[arg(long, default_value = "gaussian")]
    family: String,
    /// Drop samples with missing calls instead of mean imputation.
    #[arg(long)]
    drop_missing: bool,
    /// Local level for significance calls.
    #[arg(long)]
    alpha_loc: Option<f64>,
    /// Also write the correlation matrix of the statistics here.
    #[arg(long)]
    corr_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReproduceArgs {
    /// table1, table2, table3, table4 or synthetic-top.
    experiment: String,
    #[command(flatten)]
    integration: IntegrationArgs,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    corr: CorrArgs,
}

impl CorrArgs {
    fn source(&self) -> Result<CorrSource> {
        if let Some(path) = &self.matrix {
            return Ok(CorrSource::Matrix(fileio::read_correlation_matrix(path)?.0));
        }
        if let Some(path) = &self.genotypes {
            let format: GenotypeFormat = self.genotype_format.parse()?;
            let data = fileio::load_genotype_table(path, format)?;
            let policy = if self.pairwise { MissingPolicy::PairwiseComplete } else { MissingPolicy::RequireComplete };
            return Ok(CorrSource::Matrix(estimate_from_genotypes(&data, policy)?));
        }
        let kind: StructureKind = self
            .structure
            .as_deref()
            .ok_or_else(|| Error::InvalidParameter("give --structure, --matrix or --genotypes".into()))?
            .parse()?;
        let dim = self.dim.ok_or_else(|| Error::InvalidParameter("--structure needs --dim".into()))?;
        let spec = StructuredSpec::new(kind, self.rho, dim)?;
        match self.blocks {
            None | Some(1) => Ok(CorrSource::Structured(spec)),
            Some(0) => Err(Error::InvalidParameter("--blocks must be positive".into())),
            Some(n) => Ok(CorrSource::Matrix(CorrelationMatrix::block_diagonal(&vec![spec.build()?; n])?)),
        }
    }

    fn block(&self) -> Result<Option<(StructuredSpec, usize)>> {
        match (&self.structure, self.dim, self.blocks) {
            (Some(s), Some(dim), Some(n)) => Ok(Some((StructuredSpec::new(s.parse()?, self.rho, dim)?, n))),
            _ => Ok(None),
        }
    }
}

impl IntegrationArgs {
    fn config(&self, dim: usize, seed: u64) -> QmcConfig {
        let mut cfg = QmcConfig::for_dim(dim).with_seed(seed);
        if let Some(t) = self.abs_tol {
            cfg = cfg.with_abs_tol(t);
        }
        if let Some(p) = self.max_points {
            cfg = cfg.with_max_points(p);
        }
        cfg
    }
}

struct Output {
    format: Format,
    sink: Box<dyn Write>,
}

impl Output {
    fn json<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer_pretty(&mut self.sink, value)?;
        writeln!(self.sink)?;
        Ok(())
    }

    fn csv(&mut self, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(&mut self.sink);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn sci(x: f64) -> String {
    format!("{x:.6e}")
}

fn parse_fwer_method(name: Option<&str>, src: &CorrSource) -> Result<FwerMethod> {
    name.map_or_else(|| Ok(fwer::exact_engine(src)), str::parse)
}

fn cmd_meff(args: &MeffArgs, seed: u64, out: &mut Output) -> Result<()> {
    let src = args.corr.source()?;
    let methods: Vec<MeffMethod> = if args.method.is_empty() {
        MeffMethod::EIGEN.to_vec()
    } else {
        args.method.iter().map(|m| m.parse()).collect::<Result<_>>()?
    };
    let correction: Correction = args.correction.parse()?;
    let settings = MethodSettings {
        alpha: args.alpha,
        gao: GaoConfig { cutoff: args.gao_cutoff, block_size: args.block_size },
        correction,
        solve: SolveOptions { qmc: args.integration.config(src.dim(), seed), ..SolveOptions::default() },
    };
    let block = if args.block_wise { args.corr.block()? } else { None };
    let mut results = Vec::with_capacity(methods.len());
    for method in methods {
        let res = match block {
            Some((spec, n)) if method.is_eigen_based() => {
                let one = fwer::estimate_meff(method, &CorrSource::Structured(spec), &settings)?;
                MeffResult::from_meff(method, one.meff * n as f64, args.alpha, correction)?
                    .with_param("per_block_meff", one.meff)
                    .with_param("blocks", n)
            }
            _ => fwer::estimate_meff(method, &src, &settings)?,
        };
        results.push(res);
    }
    match out.format {
        Format::Json => out.json(&results),
        Format::Csv => {
            let rows: Vec<Vec<String>> = results
                .iter()
                .map(|r| {
                    vec![
                        r.method.label().to_owned(),
                        format_sig(r.meff, 7),
                        r.alpha.to_string(),
                        sci(r.alpha_loc),
                        r.correction.label().to_owned(),
                    ]
                })
                .collect();
            out.csv(&["method", "meff", "alpha", "alpha_loc", "correction"], &rows)
        }
    }
}

fn cmd_solve(args: &SolveArgs, seed: u64, out: &mut Output) -> Result<()> {
    let src = args.corr.source()?;
    let method = parse_fwer_method(args.method.as_deref(), &src)?;
    let opts = SolveOptions { tol: args.tol, qmc: args.integration.config(src.dim(), seed), ..SolveOptions::default() };
    let r = fwer::solve_alpha_loc(&src, args.alpha, method, &opts)?;
    match out.format {
        Format::Json => out.json(&serde_json::json!({ "method": method, "alpha": args.alpha, "result": r })),
        Format::Csv => out.csv(
            &["method", "alpha", "alpha_loc", "achieved_fwer", "fwer_error", "meff", "iterations", "converged"],
            &[vec![
                method.label().to_owned(),
                args.alpha.to_string(),
                sci(r.alpha_loc),
                format_sig(r.achieved_fwer, 7),
                format!("{:.3e}", r.fwer_error),
                format_sig(r.meff_equivalent, 7),
                r.iterations.to_string(),
                r.converged.to_string(),
            ]],
        ),
    }
}

fn cmd_fwer(args: &FwerArgs, seed: u64, out: &mut Output) -> Result<()> {
    let src = args.corr.source()?;
    let method = parse_fwer_method(args.method.as_deref(), &src)?;
    let alpha_loc = match (args.alpha_loc, args.meff) {
        (Some(a), _) => a,
        (None, Some(m)) => experiment::external_result(m, args.alpha)?.alpha_loc,
        (None, None) => return Err(Error::InvalidParameter("give --alpha-loc or --meff".into())),
    };
    let est: MvnEstimate = FwerEvaluator::new(&src, method, args.integration.config(src.dim(), seed))?.eval(alpha_loc)?;
    match out.format {
        Format::Json => out.json(&serde_json::json!({ "method": method, "alpha_loc": alpha_loc, "fwer": est })),
        Format::Csv => out.csv(
            &["method", "alpha_loc", "fwer", "abs_error", "n_points", "converged"],
            &[vec![
                method.label().to_owned(),
                sci(alpha_loc),
                format_sig(est.value, 7),
                format!("{:.3e}", est.abs_error),
                est.n_points.to_string(),
                est.converged.to_string(),
            ]],
        ),
    }
}

fn cmd_score(args: &ScoreArgs, out: &mut Output) -> Result<()> {
    let format: GenotypeFormat = args.genotype_format.parse()?;
    let mut data = fileio::load_genotype_table(&args.genotypes, format)?;
    if let Some(path) = &args.phenotype {
        let table = fileio::read_numeric_table(path)?;
        if table.values.ncols() != 1 {
            return Err(Error::Data(format!("phenotype file has {} columns, expected 1", table.values.ncols())));
        }
        data = data.with_phenotype(table.values.column(0).iter().copied().collect())?;
    }
    if let Some(path) = &args.covariates {
        data = data.with_covariates(fileio::read_numeric_table(path)?.values)?;
    }
    let family: Family = args.family.parse()?;
    let policy = if args.drop_missing { MissingGenotypes::DropRows } else { MissingGenotypes::MeanImpute };
    let (fit, stats) = score::score_test(&data, family, policy)?;
    let p = score::marker_pvalues(&stats);
    if let Some(path) = &args.corr_out {
        fileio::write_correlation_matrix(path, &stats.t_corr, Some(&stats.marker_ids))?;
    }
    let significant = args.alpha_loc.map(|a| score::significant(&stats, a));
    match out.format {
        Format::Json => {
            let markers: Vec<serde_json::Value> = (0..stats.t.len())
                .map(|j| {
                    serde_json::json!({
                        "marker": stats.marker_ids[j],
                        "u": stats.u[j],
                        "v": stats.v_diag[j],
                        "t": stats.t[j],
                        "p": p[j],
                        "significant": significant.as_ref().map(|s| s[j]),
                    })
                })
                .collect();
            out.json(&serde_json::json!({ "null_model": fit, "excluded": stats.excluded, "markers": markers }))
        }
        Format::Csv => {
            let rows: Vec<Vec<String>> = (0..stats.t.len())
                .map(|j| {
                    vec![
                        stats.marker_ids[j].clone(),
                        sci(stats.u[j]),
                        sci(stats.v_diag[j]),
                        sci(stats.t[j]),
                        sci(p[j]),
                        significant.as_ref().map(|s| s[j].to_string()).unwrap_or_default(),
                    ]
                })
                .collect();
            out.csv(&["marker", "u", "v", "t", "p", "significant"], &rows)
        }
    }
}

fn cmd_reproduce(args: &ReproduceArgs, seed: u64, out: &mut Output) -> Result<()> {
    let mut spec = ExperimentSpec::builtin(&args.experiment, seed)?;
    if let Some(t) = args.integration.abs_tol {
        spec.qmc = spec.qmc.with_abs_tol(t);
    }
    if let Some(p) = args.integration.max_points {
        spec.qmc = spec.qmc.with_max_points(p);
    }
    let report = run_experiment(&spec)?;
    match out.format {
        Format::Json => experiment::write_json(&report, &mut out.sink),
        Format::Csv => experiment::write_csv(&report, &mut out.sink),
    }
}

fn cmd_gen(args: &GenArgs, out: &mut Output) -> Result<()> {
    let r = args.corr.source()?.matrix()?;
    match out.format {
        Format::Json => {
            let rows: Vec<Vec<f64>> = r.values().row_iter().map(|row| row.iter().copied().collect()).collect();
            out.json(&rows)
        }
        Format::Csv => fileio::write_matrix_csv(&mut out.sink, r.values(), None),
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let seed = match cli.seed {
        Some(s) => s,
        None => experiment::default_seed()?,
    };
    let sink: Box<dyn Write> = match &cli.out {
        Some(path) => Box::new(io::BufWriter::new(File::create(path)?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut out = Output { format: cli.format, sink };
    match &cli.command {
        Command::Meff(a) => cmd_meff(a, seed, &mut out)?,
        Command::Solve(a) => cmd_solve(a, seed, &mut out)?,
        Command::Fwer(a) => cmd_fwer(a, seed, &mut out)?,
        Command::Score(a) => cmd_score(a, &mut out)?,
        Command::Reproduce(a) => cmd_reproduce(a, seed, &mut out)?,
        Command::Gen(a) => cmd_gen(a, &mut out)?,
    }
    out.sink.flush()?;
    Ok(())
}

fn report_error(err: &Error, json: bool) {
    if json {
        let body = serde_json::json!({ "error": { "kind": err.kind(), "message": err.to_string(), "exit_code": err.exit_code() } });
        eprintln!("{body}");
    } else {
        eprintln!("error: {err}");
    }
}

/// Runs the command line and returns the process exit code: 0 success,
/// 1 usage, 2 data error, 3 numerical failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let wants_json = argv.windows(2).any(|w| w[0] == "--format" && w[1] == "json")
        || argv.iter().any(|a| a == "--format=json");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            if wants_json {
                let body = serde_json::json!({ "error": { "kind": "usage", "message": e.to_string(), "exit_code": 1 } });
                eprintln!("{body}");
            } else {
                let _ = e.print();
            }
            return 1;
        }
    };
    if cli.verbose {
        let _ = env_logger::Builder::new().filter_level(log::LevelFilter::Info).try_init();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            report_error(&e, cli.format == Format::Json);
            e.exit_code()
        }
    }
}
