use thiserror::Error;

/// Errors surfaced by the library.
///
/// Several variants are "soft": the trainer catches them, zeroes the
/// affected loss term and records a skip flag instead of aborting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient voxels: need at least {needed}, found {found}")]
    InsufficientVoxels { needed: usize, found: usize },

    #[error("no anchor has both a positive and a negative pair")]
    NoValidPairs,

    #[error("consensus prototypes unavailable for class {0}")]
    ConsensusUnavailable(usize),

    #[error("phantom generation failed for seed {0}")]
    GenerationFailed(u64),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("L-U gap undefined: no {0} cases")]
    GapUndefined(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
