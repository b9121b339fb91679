use std::path::PathBuf;

/// Crate-wide error type. Each variant maps to one machine-readable error
/// class reported by the CLI and the C ABI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("format error in {source_name}: {detail}")]
    Format { source_name: String, detail: String },

    #[error("range error: {0}")]
    Range(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("data integrity error: {0}")]
    Integrity(String),

    #[error("capacity error: {targets} targets but only {queries} free queries")]
    Capacity { targets: usize, queries: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error (format version {version}): {detail}")]
    Checkpoint { version: u32, detail: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable short name of the error class, used in CLI output and FFI codes.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Axis { .. } | Error::NonScalarLoss(_) => "ShapeError",
            Error::Format { .. } => "FormatError",
            Error::Range(_) => "RangeError",
            Error::Config(_) => "ConfigError",
            Error::Sampling(_) => "SamplingError",
            Error::Integrity(_) => "IntegrityError",
            Error::Capacity { .. } => "CapacityError",
            Error::Numeric(_) => "NumericError",
            Error::Checkpoint { .. } => "CheckpointError",
            Error::Alignment(_) => "AlignmentError",
            Error::Contract(_) => "ContractError",
            Error::Io { .. } => "IoError",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
