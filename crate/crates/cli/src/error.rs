use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("malformed artifact: {0}")]
    MalformedArtifact(String),

    #[error("output directory is locked: {0}")]
    OutputLocked(String),

    #[error(transparent)]
    Core(#[from] labelshift_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;
