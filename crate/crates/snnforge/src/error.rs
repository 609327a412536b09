use std::path::PathBuf;

use snnforge_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Core(CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Numerical(_) => 4,
            CliError::Core(CoreError::NonFinite { .. } | CoreError::DeadLayer { .. }) => 4,
            CliError::Core(_) => 2,
            CliError::Io { .. } | CliError::Format { .. } => 1,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> CliError {
        CliError::Format { path: path.into(), detail: detail.into() }
    }

    pub fn missing(path: impl Into<PathBuf>, hint: impl Into<String>) -> CliError {
        CliError::MissingArtifact { path: path.into(), hint: hint.into() }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
