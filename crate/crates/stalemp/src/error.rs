use thiserror::Error;

/// Crate-wide error type; variants mirror the failure contracts of the public ops.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed line {line} in {path}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("node id {id} out of range for {num_nodes} declared nodes ({context})")]
    NodeIdRange {
        id: usize,
        num_nodes: usize,
        context: String,
    },
    #[error("count mismatch: {what} has {got} entries, expected {expected}")]
    CountMismatch {
        what: String,
        got: usize,
        expected: usize,
    },
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: String, details: String },
    #[error("invalid argument for {op}: {details}")]
    InvalidArg { op: String, details: String },
    #[error("cannot partition {num_nodes} nodes into {k} clusters")]
    TooManyClusters { k: usize, num_nodes: usize },
    #[error("batch construction needs at least one cluster id")]
    EmptyBatch,
    #[error("history level {level} out of range (store has {levels} levels)")]
    BadLevel { level: usize, levels: usize },
    #[error("level 0 of the history store mirrors raw features and cannot be written")]
    PushLevelZero,
    #[error("push at iteration {iter} would move node {node} backwards (stamped {stamped})")]
    StalePush { iter: u64, node: usize, stamped: u64 },
    #[error("negative staleness value {value} for node {node}")]
    NegativeStaleness { node: usize, value: f64 },
    #[error("epoch index {t} is invalid; epochs are 1-indexed")]
    EpochIndex { t: usize },
    #[error("backward root must be a scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("optimizer step with unpopulated gradient for parameter {name}")]
    MissingGrad { name: String },
    #[error("power iteration did not converge within {iters} iterations (last delta {delta:e})")]
    PowerIterDiverged { iters: usize, delta: f64 },
    #[error("checkpoint {path} is corrupt: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
