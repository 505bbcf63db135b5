use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not symmetric: entry ({row}, {col}) differs from its transpose by {diff:e}")]
    NotSymmetric { row: usize, col: usize, diff: f64 },

    #[error("not a correlation matrix: {0}")]
    InvalidCorrelation(String),

    #[error("matrix not positive definite: pivot {pivot} has residual variance {residual:e}")]
    NotPositiveDefinite { pivot: usize, residual: f64 },

    #[error("marker {marker} has zero sample variance")]
    ZeroVariance { marker: String },

    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("missing genotype at row {row}, column {col}")]
    MissingValue { row: usize, col: usize },

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("{0}")]
    Data(String),

    #[error("design matrix is rank deficient: column {0} is collinear with earlier columns")]
    RankDeficient(String),

    #[error("logistic null model separates the data: fitted means reached 0 or 1")]
    Separation,

    #[error("did not converge: {0}")]
    NoConvergence(String),

    #[error(
        "FWER is not monotone in the local level: FWER({lo:e}) = {f_lo} > FWER({hi:e}) = {f_hi} \
         beyond the integration error; tighten the integration tolerance"
    )]
    NonMonotone { lo: f64, f_lo: f64, hi: f64, f_hi: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    ///
    /// 2 for bad input data, 3 for numerical failures. Usage errors (1) are
    /// produced by argument parsing before any `Error` exists.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::NoConvergence(_)
            | Error::NonMonotone { .. }
            | Error::Separation
            | Error::RankDeficient(_) => 3,
            _ => 2,
        }
    }

    /// Short machine-readable tag for JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::NotSymmetric { .. } => "not_symmetric",
            Error::InvalidCorrelation(_) => "invalid_correlation",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::ZeroVariance { .. } => "zero_variance",
            Error::TooFewSamples(_) => "too_few_samples",
            Error::MissingValue { .. } => "missing_value",
            Error::Parse { .. } => "parse",
            Error::Data(_) => "data",
            Error::RankDeficient(_) => "rank_deficient",
            Error::Separation => "separation",
            Error::NoConvergence(_) => "no_convergence",
            Error::NonMonotone { .. } => "non_monotone",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
