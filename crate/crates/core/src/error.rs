use thiserror::Error;

#[derive(Debug, Error)]
pub enum LadError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("non-finite {term} at step {step}")]
    NonFinite { term: String, step: u64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<LadError>,
    },
    #[error(transparent)]
    Tensor(#[from] lad_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LadError>;
