use courier_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Failed(String),
    #[error("{failed} of {total} grid cell(s) failed")]
    CellsFailed { failed: usize, total: usize, code: i32 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::MissingArtifact(_) => 4,
            CliError::Numeric(_) => 5,
            CliError::Failed(_) => 1,
            CliError::CellsFailed { code, .. } => *code,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => CliError::Config(m),
            CoreError::MissingResource(m) => CliError::MissingArtifact(m),
            e @ CoreError::Numeric { .. } => CliError::Numeric(e.to_string()),
            CoreError::Diff(courier_core::DiffError::Numeric(m)) => CliError::Numeric(m),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Failed(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
