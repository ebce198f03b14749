use std::path::PathBuf;

/// Errors from file handling, configuration and the numerical core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] genrec_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 1 for invalid input or configuration, 2 for
    /// failures while running (divergence, internal errors).
    pub fn exit_code(&self) -> i32 {
        use genrec_core::Error as E;
        match self {
            Error::Core(E::Divergence(_) | E::Shape { .. } | E::NonScalarLoss(_)) => 2,
            _ => 1,
        }
    }
}
