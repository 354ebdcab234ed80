use std::path::PathBuf;

/// Errors raised by the numeric kernel, the models, and the pipeline stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate softmax row (every entry is -inf) in {0}")]
    DegenerateRow(&'static str),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("sequence of {n} tokens does not fit the {window}-token positional window")]
    OutOfWindow { n: usize, window: usize },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("phase mismatch: expected `{expected}`, found `{found}`")]
    PhaseMismatch { expected: String, found: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
