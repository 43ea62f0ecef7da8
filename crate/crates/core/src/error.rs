use thiserror::Error;

/// Errors raised anywhere in the extraction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite numeric input: {0}")]
    NumericInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("query budget exhausted: requested {requested}, remaining {remaining}")]
    BudgetExhausted { requested: usize, remaining: usize },

    #[error("invalid image input: {0}")]
    Input(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("training diverged at {unit} {index}: {reason}")]
    Training {
        unit: &'static str,
        index: usize,
        reason: String,
    },

    #[error("resume error: {0}")]
    Resume(String),

    #[error("comparison error: {0}")]
    Compare(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
