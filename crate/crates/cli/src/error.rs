use std::path::Path;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing input `{0}`; run the upstream stage first")]
    MissingInput(String),
    #[error("stale input: {0}")]
    Stale(String),
    #[error("`{0}` changed after its stage manifest was written")]
    Tampered(String),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] renalseq_core::Error),
    #[error("{source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn invalid(path: &Path, message: impl ToString) -> Self {
        CliError::Invalid {
            path: path.display().to_string(),
            message: message.to_string(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ CliError::Stage { .. } => e,
            e => CliError::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing_input",
            CliError::Stale(_) => "stale_input",
            CliError::Tampered(_) => "tampered_input",
            CliError::Invalid { .. } => "invalid_input",
            CliError::Io { .. } => "io",
            CliError::Core(
                renalseq_core::Error::Config(_) | renalseq_core::Error::Fractions(_),
            ) => "config",
            CliError::Core(_) => "pipeline",
            CliError::Stage { source, .. } => source.kind(),
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            CliError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        let message = self.to_string().replace('\n', " ");
        json!({"error": self.kind(), "stage": self.stage(), "message": message}).to_string()
    }
}
