use std::path::PathBuf;

/// Errors produced anywhere in the optimization pipeline.
#[derive(Debug, thiserror::Error)]
pub enum MapoError {
    #[error("sequence of {len} tokens exceeds the context window of {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("completion must contain at least one token")]
    EmptyCompletion,

    #[error("endpoint error: {0}")]
    Endpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("operation not supported for a {0} model")]
    Unsupported(&'static str),

    #[error("non-finite loss in {component}: {value}")]
    NonFiniteLoss { component: String, value: f64 },

    #[error("stage `{stage}` requires `{missing}` to have completed first")]
    MissingUpstream { stage: String, missing: String },

    #[error("stage `{0}` already completed; pass --force to rerun")]
    StageCompleted(String),

    #[error("artifact {0} is missing or does not match its recorded digest")]
    DigestMismatch(PathBuf),

    #[error("missing checkpoint at {0}")]
    MissingCheckpoint(PathBuf),

    #[error("schema error in {path} line {line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MapoError>;
