use thiserror::Error;

/// Errors raised by grid construction, solvers, analysis and I/O.
#[derive(Debug, Error)]
pub enum FpiError {
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("{solver} did not converge: {iterations} iterations, relative residual {residual:.3e}")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("state dimension {dimension} exceeds the dense-analysis cap {cap}")]
    DimensionGuard { dimension: usize, cap: usize },

    #[error("field lengths do not match the grid: {0}")]
    GridMismatch(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("trajectory does not decay: fitted slope {slope:.3e} is not negative")]
    NoDecay { slope: f64 },

    #[error("certification failed: {0}")]
    Certification(String),

    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FpiError {
    /// Process exit status: 1 for bad input, 2 for solver failures, 3 for
    /// failed certification.
    pub fn exit_code(&self) -> i32 {
        match self {
            FpiError::Validation { .. }
            | FpiError::DimensionGuard { .. }
            | FpiError::GridMismatch(_)
            | FpiError::Parse { .. }
            | FpiError::Io { .. } => 1,
            FpiError::NonConvergence { .. }
            | FpiError::Singular(_)
            | FpiError::Eigen(_)
            | FpiError::InsufficientData(_)
            | FpiError::NoDecay { .. } => 2,
            FpiError::Certification(_) => 3,
        }
    }

    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        FpiError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        FpiError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FpiError>;
