use thiserror::Error;

/// Errors surfaced by the numeric core and everything built on it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at {context}: {lhs:?} vs {rhs:?}")]
    DimMismatch {
        context: String,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value produced at {0}")]
    NonFinite(String),

    #[error("unbound leaf `{0}`")]
    UnboundLeaf(String),

    #[error("gradient requested for constant or unknown leaf `{0}`")]
    NotALeaf(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range 1..={num_categories}")]
    LabelOutOfRange { label: usize, num_categories: usize },

    #[error("training diverged at epoch {epoch} (loss was NaN); last good checkpoint retained")]
    Diverged { epoch: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
