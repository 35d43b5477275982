use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NbcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NbcError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("singular normal equations ({rows} rows, {cols} augmented columns)")]
    Singular { rows: usize, cols: usize },

    #[error("value {value} at index {index} overflows binary16")]
    F16Overflow { index: usize, value: f64 },

    #[error("bit width {0} outside the supported range [2, 8]")]
    InvalidBits(u32),

    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("{kind} inverse is undefined at {value}")]
    Domain { kind: &'static str, value: f64 },

    #[error("fit needs at least {needed} rows, got {got}")]
    InsufficientRows { needed: usize, got: usize },

    #[error("{0} subset is empty")]
    EmptySubset(&'static str),

    #[error("hold-out split needs at least 2 records, got {0}")]
    TooFewRecords(usize),

    #[error("invalid search config: {0}")]
    InvalidConfig(String),

    #[error("evaluator failed at N = {n}: {source}")]
    Evaluator {
        n: f64,
        #[source]
        source: Box<NbcError>,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl NbcError {
    pub(crate) fn dims(op: &'static str, detail: impl Into<String>) -> Self {
        NbcError::DimensionMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NbcError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for usage and configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            NbcError::Config(_) => 2,
            NbcError::Io { .. } => 2,
            _ => 1,
        }
    }

    /// Short stable tag used in single-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            NbcError::DimensionMismatch { .. } => "dimension",
            NbcError::Singular { .. } => "singular",
            NbcError::F16Overflow { .. } => "f16-overflow",
            NbcError::InvalidBits(_) | NbcError::InvalidParams(_) => "params",
            NbcError::Empty(_) | NbcError::EmptySubset(_) => "empty",
            NbcError::Domain { .. } => "domain",
            NbcError::InsufficientRows { .. } => "rows",
            NbcError::TooFewRecords(_) => "records",
            NbcError::InvalidConfig(_) => "search-config",
            NbcError::Evaluator { .. } => "evaluator",
            NbcError::Format(e) => e.kind(),
            NbcError::Config(_) => "config",
            NbcError::Io { .. } => "io",
        }
    }
}

/// Errors from decoding tensor and bundle files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    BadVersion(u8),

    #[error("unknown dtype byte {0}")]
    BadDtype(u8),

    #[error("unknown {what} byte {value}")]
    BadTag { what: &'static str, value: u8 },

    #[error("truncated: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("invalid extents: {0}")]
    BadExtents(String),
}

impl FormatError {
    pub fn kind(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad-magic",
            FormatError::BadVersion(_) => "bad-version",
            FormatError::BadDtype(_) => "bad-dtype",
            FormatError::BadTag { .. } => "bad-tag",
            FormatError::Truncated { .. } => "truncated",
            FormatError::TrailingBytes(_) => "trailing-bytes",
            FormatError::BadExtents(_) => "bad-extents",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },

    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },

    #[error("line {line}: invalid value `{value}` for `{key}`")]
    BadValue { line: usize, key: String, value: String },

    #[error("config file not found: {0}")]
    Missing(PathBuf),

    #[error("{0}")]
    Invalid(String),
}
