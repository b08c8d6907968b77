use std::path::PathBuf;

use crate::datamodel::CandidatePrompt;

/// Unified error type for the audit pipeline.
#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("schema violation in `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("template error: missing binding for placeholder `{0}`")]
    MissingBinding(String),

    #[error("gateway error: {message} (retriable: {retriable})")]
    Gateway { message: String, retriable: bool },

    #[error("backend capability missing: {0}")]
    Capability(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("prompt forging exhausted its retry budget with {got} of {want} valid prompts")]
    ForgeExhausted {
        want: usize,
        got: usize,
        partial: Vec<CandidatePrompt>,
    },

    #[error("unknown {kind}: `{key}`")]
    Lookup { kind: &'static str, key: String },

    #[error("missing artifact `{artifact}`: run `{prerequisite}` first")]
    MissingArtifact {
        artifact: String,
        prerequisite: String,
    },

    #[error("report error: {0}")]
    Report(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl AuditError {
    pub fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        AuditError::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AuditError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, AuditError>;
