use thiserror::Error;

#[derive(Debug, Error)]
pub enum TorError {
    /// Incompatible shapes reaching a recorded op.
    #[error("shape mismatch in {op}: {shapes}")]
    Shape { op: &'static str, shapes: String },

    /// A forward value or gradient stopped being finite.
    #[error("non-finite value at node {node} ({op})")]
    Numeric { node: usize, op: &'static str },

    /// The objective or its gradient went non-finite during an update.
    #[error("non-finite update at rollout batch {batch}, mini-batch {minibatch}")]
    Diverged { batch: u64, minibatch: usize, dump: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Scores or rollouts were produced under a different parameter snapshot.
    #[error("stale snapshot: batch was sampled under version {batch}, params are version {params}")]
    Stale { batch: u64, params: u64 },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("rank correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TorError>;

pub(crate) fn usage(msg: impl Into<String>) -> TorError {
    TorError::Usage(msg.into())
}
