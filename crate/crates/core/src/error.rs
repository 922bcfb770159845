use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {what}: expected {expected:?}, found {found:?}")]
    BadMagic {
        what: String,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("payload size mismatch in {what}: header implies {expected} values, found {found}")]
    PayloadSize {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is singular or not positive definite in {context}{hint}")]
    Singular { context: &'static str, hint: &'static str },

    #[error("requested dimension {requested} exceeds achievable rank {rank}")]
    RankExceeded { requested: usize, rank: usize },

    #[error("zero-norm vector cannot be cosine-scored")]
    ZeroNorm,

    #[error("scores contain only one trial class; need at least one target and one nontarget")]
    SingleClass,

    #[error("unresolved id: {0}")]
    UnresolvedId(String),

    #[error("trial sets differ between fused systems")]
    TrialMismatch,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("parse error in {what} line {line}: {msg}")]
    Parse { what: String, line: usize, msg: String },

    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("{stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
