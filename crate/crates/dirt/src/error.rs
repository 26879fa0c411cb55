use thiserror::Error;

/// Crate-wide error type. Variants are grouped so the CLI can map them onto
/// its exit-code classes (usage / data / numeric).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit-code class for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => 1,
            Error::Parse { .. } | Error::Checkpoint(_) | Error::Io(_) => 2,
            Error::ShapeMismatch { .. } | Error::NonFinite { .. } | Error::Diverged { .. } => 3,
        }
    }
}
