use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: stage `{stage}` has not produced {what}")]
    MissingStage { stage: String, what: String },
    #[error("artifact {path} does not match its recorded hash (expected {expected}, found {found})")]
    HashMismatch { path: PathBuf, expected: String, found: String },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("quality gate failed: {0}")]
    Gate(String),
    #[error(transparent)]
    Core(texbridge_core::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<texbridge_core::Error> for CliError {
    fn from(e: texbridge_core::Error) -> Self {
        use texbridge_core::Error as E;
        match e {
            E::NonFinite(m) => CliError::Numerical(m),
            E::Io(io) => CliError::Io(io),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingStage { .. } | CliError::HashMismatch { .. } | CliError::MissingFile(_) => 3,
            CliError::Numerical(_) | CliError::Gate(_) => 4,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
