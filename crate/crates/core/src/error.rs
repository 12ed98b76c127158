use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid sketch: {0}")]
    InvalidSketch(String),

    #[error("unknown shape kind `{0}` (expected square, triangle, circle or zigzag)")]
    UnknownShape(String),

    #[error("dictionary too coarse: K = {0}, need at least 4 orientations")]
    DictionaryTooCoarse(usize),

    #[error("invalid primitive length {0}: must be positive and finite")]
    InvalidPrimitiveLength(f64),

    #[error("zero stroke: cosine similarity is undefined for a zero-length vector")]
    ZeroStroke,

    #[error("unknown primitive id {id} (dictionary has {size})")]
    UnknownPrimitive { id: usize, size: usize },

    #[error("invalid token sequence at position {position}: {kind}")]
    Token { position: usize, kind: TokenErrorKind },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },

    #[error("no contributing positions: every target is ignored")]
    NoContributingPositions,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds the context window of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("checkpoint mismatch on `{field}`: file has {found}, expected {expected}")]
    CheckpointMismatch {
        field: String,
        found: String,
        expected: String,
    },

    #[error("format version mismatch in {path}: found {found}, expected {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Structural problems detected while decoding a token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenErrorKind {
    #[error("missing BOS")]
    MissingBos,
    #[error("missing EOS")]
    MissingEos,
    #[error("SEP in terminal position")]
    TerminalSep,
    #[error("consecutive SEP tokens")]
    ConsecutiveSep,
    #[error("unexpected BOS")]
    UnexpectedBos,
    #[error("PAD before EOS")]
    PadBeforeEos,
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("repeat count must be at least 1")]
    ZeroRepeat,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
