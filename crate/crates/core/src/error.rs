use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range in {op} (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("cannot select {k} items from {available} candidates")]
    Capacity { k: usize, available: usize },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("unknown document id `{0}`")]
    UnknownDoc(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what} at byte {offset}: {detail}")]
    Format {
        what: &'static str,
        offset: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
