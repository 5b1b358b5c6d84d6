use serde_json::{json, Value};
use thiserror::Error;

/// Operational failures; all map to exit code 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: {message}")]
    Expression { path: String, message: String },
    #[error("{0}")]
    Compute(String),
    #[error("{0}")]
    Output(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Json(_) => "json",
            CliError::Schema { .. } => "schema",
            CliError::Expression { .. } => "expression",
            CliError::Compute(_) => "compute",
            CliError::Output(_) => "output",
            CliError::Usage(_) => "usage",
        }
    }

    pub fn path(&self) -> Option<&str> {
        match self {
            CliError::Schema { path, .. } | CliError::Expression { path, .. } => Some(path),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Value {
        let message = match self {
            CliError::Schema { message, .. } | CliError::Expression { message, .. } => message.clone(),
            other => other.to_string(),
        };
        json!({ "error": { "kind": self.kind(), "path": self.path(), "message": message } })
    }

    pub fn compute(e: impl std::fmt::Display) -> Self {
        CliError::Compute(e.to_string())
    }
}
