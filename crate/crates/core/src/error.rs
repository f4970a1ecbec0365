//! Error type shared by every estimation module.

use thiserror::Error;

/// Broad failure class, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Malformed configuration or formula text.
    Config,
    /// Missing, malformed or inconsistent input data.
    Data,
    /// The numerical procedure could not produce an estimate.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("formula syntax error at byte {offset}: {message}")]
    FormulaSyntax { offset: usize, message: String },

    #[error("empty formula")]
    EmptyFormula,

    #[error("duplicate term `{0}` in formula")]
    DuplicateTerm(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),

    #[error("column `{name}` has {found} rows, expected {expected}")]
    ColumnLength {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("table must contain at least one row")]
    EmptyTable,

    #[error("csv row {row}, column `{column}`: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },

    #[error("column `{0}` must contain only 0/1 values")]
    NotBinary(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(
        "rank-deficient design (reciprocal condition {rcond:.3e}); collinear terms: {terms:?}"
    )]
    RankDeficient { rcond: f64, terms: Vec<String> },

    #[error("logistic regression did not converge after {iterations} iterations (score residual {score:.3e})")]
    NonConvergence { iterations: usize, score: f64 },

    #[error("quasi-complete separation detected (coefficient norm {norm:.3e}); revise the treatment model")]
    Separation { norm: f64 },

    #[error("treatment `{0}` takes a single value; both arms are required")]
    SingleClass(String),

    #[error("non-positive error variance trace for proxy {proxy} ({trace:.3e})")]
    DegenerateErrorVariance { proxy: usize, trace: f64 },

    #[error("singular calibration block matrix (reciprocal condition {rcond:.3e}); check proxy/covariate collinearity")]
    SingularCalibration { rcond: f64 },

    #[error("calibration needs {needed} {what}, found {found}")]
    TooFew {
        what: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("bootstrap: {0}")]
    Bootstrap(String),

    #[error("simulation: {0}")]
    Simulation(String),

    #[error("artifact parse error at line {line}: {message}")]
    Artifact { line: usize, message: String },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::FormulaSyntax { .. }
            | Error::EmptyFormula
            | Error::DuplicateTerm(_)
            | Error::Artifact { .. } => ErrorCategory::Config,
            Error::UnknownColumn(_)
            | Error::DuplicateColumn(_)
            | Error::ColumnLength { .. }
            | Error::EmptyTable
            | Error::Csv { .. }
            | Error::NotBinary(_)
            | Error::Dimension(_)
            | Error::Invalid(_)
            | Error::TooFew { .. }
            | Error::SingleClass(_) => ErrorCategory::Data,
            Error::RankDeficient { .. }
            | Error::NonConvergence { .. }
            | Error::Separation { .. }
            | Error::DegenerateErrorVariance { .. }
            | Error::SingularCalibration { .. }
            | Error::Bootstrap(_)
            | Error::Simulation(_) => ErrorCategory::Numerical,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
