use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    /// A prerequisite artifact is missing.
    #[error("stage order: {0}")]
    StageOrder(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::StageOrder(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<ktd_core::KtdError> for CliError {
    fn from(e: ktd_core::KtdError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
