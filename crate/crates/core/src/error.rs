use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Dependency,
    Data,
    Internal,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Dependency => 3,
            ErrorCategory::Data => 4,
            ErrorCategory::Internal => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Dependency => "dependency",
            ErrorCategory::Data => "data",
            ErrorCategory::Internal => "internal",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("header line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported WFDB format {0} (only format 16 is supported)")]
    UnsupportedFormat(String),

    #[error("signal data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("checksum mismatch on signal {signal}: header {expected}, computed {computed}")]
    Checksum {
        signal: usize,
        expected: i16,
        computed: i16,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("filter spec error: {0}")]
    FilterSpec(String),

    #[error("unsupported sampling rate {0} Hz (must be an integer multiple of 100 Hz)")]
    UnsupportedRate(f64),

    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("patient leakage: patient {patient} appears in both {first} and {second}")]
    Leakage {
        patient: String,
        first: &'static str,
        second: &'static str,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing dependency {}: {msg}", path.display())]
    Dependency { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::FilterSpec(_) => ErrorCategory::Config,
            Error::Dependency { .. } => ErrorCategory::Dependency,
            Error::Dimension { .. } | Error::Contract(_) => ErrorCategory::Internal,
            _ => ErrorCategory::Data,
        }
    }
}
