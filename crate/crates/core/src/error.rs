use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input lies outside the domain an operation accepts.
    #[error("input domain error: {0}")]
    InputDomain(String),
    /// Invalid configuration value.
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },
    /// Mismatched grid or tensor shapes.
    #[error("shape error: {0}")]
    Shape(String),
    /// Sequence longer than the model supports.
    #[error("length error: {rows} rows exceeds max_rows {max_rows}")]
    Length { rows: usize, max_rows: usize },
    /// An operation was called on data it cannot be defined for.
    #[error("domain error: {0}")]
    Domain(String),
    /// A loss, posterior or gradient became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Preference-pair construction failed.
    #[error("curation error: {0}")]
    Curation(String),
    /// Checkpoint could not be read or does not match the expected model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// A file could not be parsed.
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    /// A referenced artifact does not exist.
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
