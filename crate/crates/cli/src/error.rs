use std::path::PathBuf;

use serde_json::json;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const MISSING_ARTIFACT: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const IO: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing artifact {}; run `plugin-se {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("corrupt artifact {}: {message}", path.display())]
    CorruptArtifact { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] plugin_se::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::MissingArtifact { .. } => exit::MISSING_ARTIFACT,
            CliError::CorruptArtifact { .. } => exit::OTHER,
            CliError::Core(plugin_se::Error::Numeric { .. }) => exit::NUMERIC,
            CliError::Core(plugin_se::Error::Io(_) | plugin_se::Error::Wav(_)) | CliError::Io(_) => exit::IO,
            CliError::Core(_) => exit::OTHER,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::CorruptArtifact { .. } => "corrupt_artifact",
            CliError::Core(plugin_se::Error::Numeric { .. }) => "numeric",
            CliError::Core(plugin_se::Error::Io(_) | plugin_se::Error::Wav(_)) | CliError::Io(_) => "io",
            CliError::Core(_) => "invalid_argument",
        }
    }

    /// Single-line JSON written to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() });
        match self {
            CliError::MissingArtifact { path, producer } => {
                v["path"] = json!(path);
                v["producer"] = json!(producer);
            }
            CliError::CorruptArtifact { path, .. } => v["path"] = json!(path),
            CliError::Core(plugin_se::Error::Numeric { trace, .. }) => v["trace"] = json!(trace),
            _ => {}
        }
        v
    }
}
