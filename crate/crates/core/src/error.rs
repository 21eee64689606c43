use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid inventory row for site '{site_id}': {rule}")]
    Inventory { site_id: String, rule: String },

    #[error("join error: {0}")]
    Join(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("estimation did not converge after {iterations} iterations: {reason}\n{trace}")]
    NonConvergence {
        iterations: usize,
        reason: String,
        trace: String,
    },

    #[error("pipeline stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        if let csv::ErrorKind::Io(_) = source.kind() {
            let path = path.into();
            return match source.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io { path, source: io },
                _ => unreachable!(),
            };
        }
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end:
    /// 2 validation, 3 estimation non-convergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 4,
            Error::NonConvergence { .. } => 3,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
