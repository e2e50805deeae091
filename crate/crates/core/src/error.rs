use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown flow `{name}` (known flows: {known})")]
    UnknownFlow { name: String, known: String },

    #[error("unknown scheme `{name}` (known schemes: {known})")]
    UnknownScheme { name: String, known: String },

    #[error("scheme `{scheme}` requires a field whose component i does not depend on x^i; `{field}` is not flagged")]
    NotComponentIndependent { scheme: &'static str, field: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite position for particle {particle} at step {step}")]
    NonFinite { particle: usize, step: u64 },

    #[error("checkpoint times differ: {0} vs {1}")]
    CheckpointMismatch(f64, f64),

    #[error("{what} did not converge after {iterations} iterations (achieved {achieved:e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        achieved: f64,
    },

    #[error("image cutoff {cutoff} leaves tail mass {tail:e} per row (limit 1e-12)")]
    InsufficientImages { cutoff: usize, tail: f64 },

    #[error("source field has non-zero grid mean {0:e}")]
    NonZeroMean(f64),

    #[error("budget of {0} s exhausted")]
    BudgetExhausted(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
