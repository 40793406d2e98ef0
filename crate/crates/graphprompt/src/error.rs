//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A file could not be read or written.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A data file is syntactically or structurally malformed.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// The same (service, slot) pair was defined twice.
    #[error("duplicate definition of slot '{slot}' in service '{service}'")]
    DuplicateDefinition { service: String, slot: String },

    /// A name refers to something that does not exist.
    #[error("unknown reference: {0}")]
    Reference(String),

    /// Operand shapes do not conform for a tensor operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A synthetic corpus spec is invalid.
    #[error("corpus spec error: {0}")]
    Spec(String),

    /// Pooling was asked to run on a graph with no nodes.
    #[error("empty graph: {0}")]
    EmptyGraph(String),

    /// An operation received an empty or otherwise unusable argument.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A metric has no defined value on the given input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A gradient contained NaN; names the offending parameter.
    #[error("NaN gradient for parameter '{0}'")]
    NanGradient(String),

    /// A tensor flagged frozen changed value after training steps.
    #[error("frozen parameter drift: {0}")]
    FrozenDrift(String),

    /// A checkpoint and the data or config it is used with do not match.
    #[error("incompatible: {0}")]
    Incompatible(String),

    /// A checkpoint file failed integrity verification.
    #[error("checkpoint corrupt: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(path: impl AsRef<std::path::Path>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            detail: detail.into(),
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 for usage/config/data-format
    /// problems, 3 for checkpoint/data incompatibilities, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Spec(_)
            | Error::Format { .. }
            | Error::Argument(_)
            | Error::Io { .. } => 2,
            Error::Incompatible(_) | Error::Checkpoint(_) => 3,
            _ => 1,
        }
    }
}
