use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit codes: validation problems exit 1,
/// missing upstream artifacts exit 2, numeric failures exit 3.
#[derive(Error, Debug)]
pub enum SentraError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("missing artifact: {what}; run `sentra {produce_with}` first")]
    MissingArtifact { what: String, produce_with: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SentraError>;

impl SentraError {
    pub fn shape(msg: impl Into<String>) -> Self {
        SentraError::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        SentraError::Contract(msg.into())
    }

    /// Exit code for the CLI surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            SentraError::MissingArtifact { .. } => 2,
            SentraError::Numeric(_) => 3,
            _ => 1,
        }
    }
}
