use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty dimension: {0}")]
    EmptyDimension(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("token alignment error: enrich has {enrich} tokens, target has {target}")]
    Alignment { enrich: usize, target: usize },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },

    #[error("non-finite loss {loss}: {diagnostics}")]
    NonFinite { loss: f64, diagnostics: String },

    #[error("length mismatch: {what}: expected {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
