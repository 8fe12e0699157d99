use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("lattice is singular (|det| = {det:e})")]
    SingularLattice { det: f64 },

    #[error("invalid crystal: {0}")]
    InvalidCrystal(String),

    #[error("hyperedge would contain {size} nodes (cap {cap}); use a smaller radius or side")]
    OversizeHyperedge { size: usize, cap: usize },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("tape does not match the network it is replayed against")]
    TapeMismatch,

    #[error("unknown species channel {index} (vocabulary has {size})")]
    Species { index: usize, size: usize },

    #[error("sampler diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("record {id}: {msg}")]
    Record { id: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
