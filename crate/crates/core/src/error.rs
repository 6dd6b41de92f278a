use std::path::PathBuf;

/// Errors produced by the estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },

    #[error("parse error at row {row}, column `{column}`: {reason}")]
    Parse { row: usize, column: String, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("insufficient data: need at least {needed} rows, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("design matrix is singular at every ridge level")]
    SingularDesign,

    #[error("parameter outside its domain: {0}")]
    Domain(String),

    #[error("moment evaluated on a row without an observed outcome")]
    MissingOutcome,

    #[error("jacobian is rank deficient (smallest/largest singular value = {ratio:e})")]
    RankDeficient { ratio: f64 },

    #[error("propensity fit did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    FitDiverged { iterations: usize, gradient_norm: f64 },

    #[error("score information is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    SingularInformation { min_eigenvalue: f64 },

    #[error("sandwich bread J'WJ is singular")]
    SingularBread,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid data-generating process: {0}")]
    Spec(String),

    #[error("unsupported specification: {0}")]
    UnsupportedSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("expression error: {0}")]
    Expr(String),

    #[error("monte carlo run failed: {0}")]
    MonteCarlo(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Expr(_) | Error::UnsupportedSpec(_) | Error::Spec(_) => ErrorClass::Usage,
            Error::MalformedRow { .. }
            | Error::Parse { .. }
            | Error::InvalidDataset(_)
            | Error::Io { .. }
            | Error::Csv(_)
            | Error::MissingOutcome
            | Error::InsufficientData { .. }
            | Error::ShapeMismatch(_) => ErrorClass::Data,
            Error::SingularDesign
            | Error::Domain(_)
            | Error::RankDeficient { .. }
            | Error::FitDiverged { .. }
            | Error::SingularInformation { .. }
            | Error::SingularBread
            | Error::MonteCarlo(_) => ErrorClass::Numerical,
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedRow { .. } => "MalformedRow",
            Error::Parse { .. } => "ParseError",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::Io { .. } => "IoError",
            Error::Csv(_) => "CsvError",
            Error::InsufficientData { .. } => "InsufficientData",
            Error::SingularDesign => "SingularDesign",
            Error::Domain(_) => "DomainError",
            Error::MissingOutcome => "MissingOutcome",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::FitDiverged { .. } => "FitDiverged",
            Error::SingularInformation { .. } => "SingularInformation",
            Error::SingularBread => "SingularBread",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::Spec(_) => "SpecError",
            Error::UnsupportedSpec(_) => "UnsupportedSpec",
            Error::Config(_) => "ConfigError",
            Error::Expr(_) => "ExprError",
            Error::MonteCarlo(_) => "MonteCarloFailure",
        }
    }
}
