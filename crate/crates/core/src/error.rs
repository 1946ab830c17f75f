use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {kind}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        kind: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape for {kind}: {shape:?} ({reason})")]
    InvalidShape {
        kind: String,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("unknown operation kind: {0}")]
    UnknownKind(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),
    #[error("node {0} is not part of this graph")]
    NodeNotInGraph(usize),
    #[error("non-finite value at coordinate {coord} during {context}")]
    NonFinite { coord: usize, context: String },
    #[error("{0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Exit code contract: 1 for validation errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) | Error::InvalidShape { .. } => 1,
            _ => 2,
        }
    }
}
