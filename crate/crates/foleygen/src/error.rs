use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or truncated file contents (bad magic, short payload, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Bad configuration: unknown keys, invalid values, missing inputs that
    /// the user must supply (e.g. a checkpoint path that does not exist).
    #[error("config error: {0}")]
    Config(String),

    /// Caller passed structurally incompatible data (dimension mismatches).
    #[error("shape error: {0}")]
    Shape(String),

    /// Semantically invalid input that passed shape checks.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Numerical failure: divergence, non-finite values, eigenvalues outside
    /// tolerance.
    #[error("numerical error: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 = config/validation, 3 = runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Io { .. } | Error::Format(_) | Error::Shape(_) | Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
