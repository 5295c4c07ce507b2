use std::path::PathBuf;

/// Errors raised by tensor ops, model assembly, and file I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("split sizes {sizes:?} do not sum to axis length {len}")]
    SplitSizeMismatch { sizes: Vec<usize>, len: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("loss is not connected to any leaf that requires grad")]
    DisconnectedGraph,

    #[error("LIF state has shape {state:?} but input has shape {input:?}")]
    StateShapeMismatch { state: Vec<usize>, input: Vec<usize> },

    #[error("LIF states were not reset before the forward pass")]
    StaleState,

    #[error("{what} = {value} is out of range {range}")]
    OutOfRange {
        what: &'static str,
        value: String,
        range: String,
    },

    #[error("invalid parameter: {0}")]
    BadParam(String),

    #[error("invalid range: {0}")]
    BadRange(String),

    #[error("bad magic number in {what}: {found:#010x}")]
    BadMagic { what: &'static str, found: u32 },

    #[error("file truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint config does not match the model: {0}")]
    ConfigMismatch(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
