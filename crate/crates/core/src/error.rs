use std::path::PathBuf;

use crate::setcalc::SubsetSelector;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("inclusion index {index} out of range (configuration has {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("subsets must be disjoint, both contain {0}")]
    Overlap(usize),

    #[error(
        "impenetrability bound violated: {measured} inclusions cover one cell, limit is {limit}"
    )]
    GammaExceeded { measured: usize, limit: usize },

    #[error("grid resolution too coarse: cell size {cell} exceeds radius/4 = {limit}")]
    Resolution { cell: f64, limit: f64 },

    #[error(
        "solver did not converge after {iterations} iterations (relative residual {residual:e})"
    )]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("solve for subset {subset} failed: {source}")]
    SubsetSolve {
        subset: SubsetSelector,
        #[source]
        source: Box<Error>,
    },

    #[error("sample {sample} failed: {source}")]
    Sample {
        sample: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no corrector cached for subset {0}")]
    MissingSolution(SubsetSelector),

    #[error("random parking did not saturate within {budget} proposals")]
    Unsaturated { budget: u64 },

    #[error("field and solution do not match: {0}")]
    Mismatch(String),

    #[error("{0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error, possibly wrapped, is a solver non-convergence.
    pub fn is_non_convergence(&self) -> bool {
        match self {
            Error::NonConvergence { .. } => true,
            Error::SubsetSolve { source, .. } | Error::Sample { source, .. } => {
                source.is_non_convergence()
            }
            _ => false,
        }
    }

    /// Process exit status for the command-line runner: 1 i/o, 2 configuration,
    /// 3 non-convergence, 4 failed cross-check.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Csv(_) => 1,
            Error::SubsetSolve { source, .. } | Error::Sample { source, .. } => source.exit_code(),
            Error::NonConvergence { .. } | Error::Unsaturated { .. } => 3,
            Error::Mismatch(_) => 4,
            _ => 2,
        }
    }
}
