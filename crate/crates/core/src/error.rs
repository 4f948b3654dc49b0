use std::path::PathBuf;

use crate::liegroup::Pose2;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("factor references unknown variable {id}")]
    UnknownVariable { id: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("singular system: zero pivot while eliminating variable {variable}")]
    Rank { variable: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("batch solver failed to decrease the objective after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        last_iterate: Vec<Pose2>,
    },

    #[error("smoother state is empty")]
    EmptyState,

    #[error("trajectory {trajectory}: {source}")]
    Trajectory {
        trajectory: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("perturbed solve for parameter {param}: {source}")]
    Perturbed {
        param: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_trajectory(self, trajectory: usize) -> Self {
        Error::Trajectory {
            trajectory,
            source: Box::new(self),
        }
    }

    /// Numeric failures map to exit code 2, everything else (configuration,
    /// files, parsing) to 1.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Rank { .. }
            | Error::NonFinite { .. }
            | Error::NonConvergence { .. }
            | Error::EmptyState => true,
            Error::Trajectory { source, .. } | Error::Perturbed { source, .. } => {
                source.is_numeric()
            }
            _ => false,
        }
    }
}
