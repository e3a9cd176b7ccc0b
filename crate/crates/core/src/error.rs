use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("truncated data in {path}: expected {expected} bytes, found {found}")]
    Truncation { path: String, expected: usize, found: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("non-finite loss term `{term}` at iteration {iteration}")]
    NonFinite { term: String, iteration: u64 },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        Error::Format { path: path.as_ref().display().to_string(), message: message.into() }
    }

    /// Short category tag printed by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Format { .. } => "format",
            Error::Truncation { .. } => "truncation",
            Error::Io { .. } => "io",
            Error::Contract(_) => "contract",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Load(_) => "load",
            Error::NonFinite { .. } => "non-finite",
        }
    }

    /// Process exit status for this category. Bad flags and bad
    /// configuration share status 2 (as clap uses for argument errors).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Format { .. } | Error::Truncation { .. } | Error::Io { .. } => 3,
            Error::Contract(_) | Error::Shape(_) => 4,
            Error::Load(_) => 5,
            Error::NonFinite { .. } => 6,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
