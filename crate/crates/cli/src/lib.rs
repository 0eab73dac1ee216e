//! Library backing the `facevol` binary: pipeline configuration, command
//! implementations, and the JSON report/manifest formats. Everything here is
//! callable without a process boundary so tests can drive whole pipelines.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use facevol_core::Error as CoreError;

/// CLI failure with a process exit code: 2 usage/environment, 3 malformed
/// input files, 4 numerical failure.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Format { path: Option<PathBuf>, message: String },
    Numerical(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Format { .. } => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Format { .. } => "format",
            CliError::Numerical(_) => "numerical",
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => m.clone(),
            CliError::Format { message, .. } => message.clone(),
        }
    }

    /// Machine-readable error payload printed on failure.
    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::json!({
            "error": { "kind": self.kind(), "message": self.message() }
        });
        if let CliError::Format {
            path: Some(path), ..
        } = self
        {
            obj["error"]["path"] = serde_json::Value::String(path.display().to_string());
        }
        obj
    }

    /// Classifies a core error, attaching the file it came from when known.
    pub fn from_core(err: CoreError, path: Option<&std::path::Path>) -> Self {
        let message = err.to_string();
        if err.is_format() {
            return CliError::Format {
                path: path.map(|p| p.to_path_buf()),
                message,
            };
        }
        if err.is_numerical() {
            return CliError::Numerical(message);
        }
        match err {
            CoreError::DimensionMismatch { .. } => CliError::Format {
                path: path.map(|p| p.to_path_buf()),
                message,
            },
            CoreError::OutOfBounds(_) => CliError::Numerical(message),
            _ => CliError::Usage(message),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl std::error::Error for CliError {}
