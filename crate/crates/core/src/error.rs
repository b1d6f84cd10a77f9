use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("row {row}: cannot parse column `{column}` value {value:?}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("patient {patient}: {message}")]
    Structure { patient: i64, message: String },

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("term `{0}` has zero standard deviation and cannot be standardized")]
    ZeroVariance(String),

    #[error("cannot parse term `{term}`: {message}")]
    TermSyntax { term: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what} did not converge after {iterations} iterations (residual max-norm {norm:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        norm: f64,
    },

    #[error("{what}: design is rank deficient")]
    RankDeficient { what: &'static str },

    #[error("monotone likelihood: coefficient {coefficient} diverges (reached {value:.3} before the likelihood went flat)")]
    Separation { coefficient: usize, value: f64 },

    #[error("balancing system has a singular Jacobian (collinear balance terms); residual max-norm {residual:.3e}, condition estimate {condition:.3e}")]
    SingularJacobian { residual: f64, condition: f64 },

    #[error("empty risk set at event time {0}")]
    EmptyRiskSet(f64),

    #[error("non-positive fitted mean under log link")]
    NonPositiveMean,

    #[error("stage `{stage}` failed at phi = {phi}: {source}")]
    Stage {
        stage: &'static str,
        phi: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("calibration step ({step}) failed: {source}")]
    Calibration {
        step: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("all {0} resampling replicates failed")]
    AllReplicatesFailed(usize),
}

impl Error {
    /// True for failures of a numerical routine as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonConvergence { .. }
            | Error::RankDeficient { .. }
            | Error::Separation { .. }
            | Error::SingularJacobian { .. }
            | Error::EmptyRiskSet(_)
            | Error::NonPositiveMean
            | Error::AllReplicatesFailed(_) => true,
            Error::Stage { source, .. } | Error::Calibration { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    pub(crate) fn stage(stage: &'static str, phi: f64) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            phi,
            source: Box::new(source),
        }
    }

    pub(crate) fn calibration(step: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Calibration {
            step,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
