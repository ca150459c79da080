use std::path::PathBuf;

/// Errors raised by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent dimensions, invalid hyperparameters or malformed targets.
    #[error("configuration error: {0}")]
    Config(String),
    /// An argument outside the domain of a function (e.g. a zero count).
    #[error("domain error: {0}")]
    Domain(String),
    /// A quantity that is mathematically undefined for the given input.
    #[error("undefined: {0}")]
    Undefined(String),
    /// A non-finite value appeared during a forward or backward pass.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// A line of a JSON-lines file could not be parsed or validated.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    /// A run directory is missing an expected artifact.
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than the runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Domain(_)
                | Error::Undefined(_)
                | Error::Parse { .. }
                | Error::MissingArtifact(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
