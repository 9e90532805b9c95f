use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum DfpfError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch} (lr {lr:.3e}, loss {loss:.3e})")]
    Divergence { epoch: usize, lr: f64, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DfpfError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        DfpfError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DfpfError>;
