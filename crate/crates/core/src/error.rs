use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FbpcError>;

#[derive(Debug, Error)]
pub enum FbpcError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("did not converge after {steps} steps (last loss {last_loss:.6}){context}")]
    NonConvergence {
        steps: usize,
        last_loss: f64,
        context: String,
    },

    #[error("capability limit: {0}")]
    Capability(String),

    #[error("numerical rank deficiency: {0}")]
    NumericalRank(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl FbpcError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FbpcError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        FbpcError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Attach outer-loop context to a non-convergence error.
    pub fn with_context(self, ctx: impl AsRef<str>) -> Self {
        match self {
            FbpcError::NonConvergence {
                steps,
                last_loss,
                context,
            } => FbpcError::NonConvergence {
                steps,
                last_loss,
                context: format!("{context} [{}]", ctx.as_ref()),
            },
            FbpcError::Divergence(msg) => {
                FbpcError::Divergence(format!("{msg} [{}]", ctx.as_ref()))
            }
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            FbpcError::Dimension(_)
            | FbpcError::Config(_)
            | FbpcError::Unsupported(_)
            | FbpcError::Validation(_)
            | FbpcError::Capability(_)
            | FbpcError::NumericalRank(_) => 1,
            FbpcError::Divergence(_) | FbpcError::NonConvergence { .. } => 2,
            FbpcError::Io { .. } | FbpcError::Format { .. } => 3,
        }
    }
}
