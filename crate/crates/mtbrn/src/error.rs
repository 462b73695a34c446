use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}{}: {message}", field.map(|f| format!(", field {f}")).unwrap_or_default())]
    Schema { path: PathBuf, line: usize, field: Option<usize>, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Core(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn schema(path: impl Into<PathBuf>, line: usize, field: Option<usize>, message: impl Into<String>) -> Self {
        Error::Schema { path: path.into(), line, field, message: message.into() }
    }

    pub fn core(e: impl std::fmt::Display) -> Self {
        Error::Core(e.to_string())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Schema { .. } => "schema",
            Error::Config(_) => "config",
            Error::Invalid(_) => "invalid_input",
            Error::Core(_) => "computation",
        }
    }

    /// The machine-readable form printed by the CLI on failure.
    pub fn to_json(&self) -> serde_json::Value {
        let mut body = json!({ "kind": self.kind(), "message": self.to_string() });
        match self {
            Error::Io { path, .. } => {
                body["path"] = json!(path);
            }
            Error::Schema { path, line, field, .. } => {
                body["path"] = json!(path);
                body["line"] = json!(line);
                if let Some(f) = field {
                    body["field"] = json!(f);
                }
            }
            _ => {}
        }
        json!({ "error": body })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
