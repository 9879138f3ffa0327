use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: degenerate (zero-norm) vector")]
    DegenerateVector { op: &'static str },

    #[error("{op}: invalid value ({detail})")]
    InvalidValue { op: &'static str, detail: String },

    #[error("token id {id} is outside the vocabulary (size {vocab_size})")]
    Token { id: u32, vocab_size: usize },

    #[error("sequence length {len} exceeds the maximum of {max_len}")]
    Length { len: usize, max_len: usize },

    #[error("unknown image id `{0}`")]
    MissingImage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch construction: {0}")]
    BatchConstruction(String),

    #[error("dataset too small: {0}")]
    Size(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite value in `{name}` at step {step}")]
    NonFinite { name: String, step: usize },

    /// Training stopped on a non-finite loss; `checkpoint` is the last
    /// parameter state whose loss was finite.
    #[error("training diverged at step {step}: {detail}")]
    Diverged {
        step: usize,
        detail: String,
        checkpoint: Box<crate::trainer::Checkpoint>,
    },

    #[error("zero-shot runs have no training phase; use evaluation directly")]
    NoTraining,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Errors caused by the user's configuration or inputs rather than by a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::EmptyDataset(_)
                | Error::Size(_)
                | Error::NoTraining
                | Error::Json(_)
        )
    }
}
