use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum SaeError {
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("calibration infeasible in area `{area}`: {msg}")]
    CalibrationInfeasible { area: String, msg: String },

    #[error("singular design: {0}")]
    Singular(String),

    #[error("variance components not identified: {0}")]
    NotIdentified(String),

    #[error("optimizer did not converge after {iterations} iterations ({trace})")]
    NonConvergence { iterations: usize, trace: String },

    #[error("degenerate shrinkage: sigma_u2 and psi are both zero")]
    DegenerateShrinkage,

    #[error("{0}")]
    Undefined(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{failed} of {total} replicates failed (limit 5%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SaeError>;

impl SaeError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        SaeError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            SaeError::Config(_) => 1,
            SaeError::Parse { .. }
            | SaeError::MissingColumn(_)
            | SaeError::Validation(_)
            | SaeError::Io { .. }
            | SaeError::Csv(_)
            | SaeError::Undefined(_) => 2,
            SaeError::CalibrationInfeasible { .. }
            | SaeError::Singular(_)
            | SaeError::NotIdentified(_)
            | SaeError::NonConvergence { .. }
            | SaeError::DegenerateShrinkage
            | SaeError::TooManyFailures { .. } => 3,
        }
    }
}
