use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KbqError {
    #[error("element id {id} outside universe of size {universe}")]
    UniverseViolation { id: usize, universe: usize },

    #[error("invalid weight {0}: weights must be finite and non-negative")]
    InvalidWeight(f32),

    #[error("incompatible sketches: {0}")]
    IncompatibleSketch(String),

    #[error("invalid sketch dimensions: depth={depth}, width={width}")]
    InvalidSketchShape { depth: usize, width: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot encode an empty set")]
    EmptySet,

    #[error("set representations over different universes ({left:?} vs {right:?})")]
    UniverseMismatch {
        left: crate::setrep::Universe,
        right: crate::setrep::Universe,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("knowledge base is empty")]
    EmptyKb,

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("embeddings have not been initialized")]
    UninitializedEmbeddings,

    #[error("triple matrix is stale: embeddings changed since it was built")]
    StaleTripleMatrix,

    #[error("query syntax error at offset {offset}: {message}")]
    QuerySyntax { offset: usize, message: String },

    #[error("ill-typed query: {0}")]
    QueryType(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("training diverged at step {step} ({task}): loss = {loss}")]
    Diverged { step: usize, task: String, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for KbqError {
    fn from(e: std::io::Error) -> Self {
        KbqError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, KbqError>;
