use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    /// Wraps a core error raised while running experiment `kind`.
    pub fn from_core(kind: &str, e: dnpr_core::Error) -> Self {
        match e {
            dnpr_core::Error::Config(msg) => CliError::Config(format!("{kind}: {msg}")),
            other => CliError::Runtime(format!("{kind}: {other}")),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
