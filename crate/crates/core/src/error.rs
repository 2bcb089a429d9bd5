use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("record {record}: {message}")]
    Format { record: usize, message: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },

    #[error("all importance weights on the {side} side are zero")]
    ZeroWeights { side: &'static str },

    #[error("retrieval failed for query {query:?}: {message}")]
    Retrieval { query: String, message: String },

    #[error("unknown labels: {}", .0.join(", "))]
    UnknownLabels(Vec<String>),

    #[error("label index {index} out of range for {labels} labels")]
    LabelIndex { index: usize, labels: usize },

    #[error("invalid distribution at position {position}: row sums to {sum}")]
    Distribution { position: usize, sum: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
