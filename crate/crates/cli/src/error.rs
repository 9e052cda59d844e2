use std::path::Path;

use thiserror::Error;

use ecm_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Metric(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.display().to_string(), message: e.to_string() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::Mismatch(_) => "mismatch",
            CliError::Data(_) => "data",
            CliError::Diverged(_) => "diverged",
            CliError::Usage(_) => "usage",
            CliError::Metric(_) => "metric",
        }
    }

    /// Process exit status; 2 is left to argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Config(_) => 4,
            CliError::Mismatch(_) => 5,
            CliError::Data(_) => 6,
            CliError::Diverged(_) => 7,
            CliError::Metric(_) => 8,
        }
    }

    /// One-line `error kind=<kind> code=<n> message="<text>"`.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ").replace('"', "'");
        format!("error kind={} code={} message=\"{msg}\"", self.kind(), self.exit_code())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io(e) => CliError::Io { path: String::new(), message: e.to_string() },
            CoreError::Config(m) => CliError::Config(m),
            CoreError::ConfigMismatch(m) => CliError::Mismatch(m),
            CoreError::Diverged { step, loss } => CliError::Diverged(format!("training diverged at step {step}: loss {loss}")),
            CoreError::InvalidArgument(m) => CliError::Usage(m),
            CoreError::Undefined(m) => CliError::Metric(m),
            other => CliError::Data(other.to_string()),
        }
    }
}
