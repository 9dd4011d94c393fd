use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor extent did not satisfy an operation's contract. `axis` names
    /// the offending axis so shape bugs are diagnosable from the message alone.
    #[error("shape mismatch on axis `{axis}`: {detail}")]
    ShapeMismatch { axis: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic bytes in `{path}`: expected {expected}")]
    BadMagic { path: String, expected: &'static str },

    #[error("unsupported format version {found} in `{path}` (expected {expected})")]
    BadVersion {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("truncated payload in `{path}`: {detail}")]
    TruncatedPayload { path: String, detail: String },

    #[error("extent mismatch in `{path}`: {detail}")]
    ExtentMismatch { path: String, detail: String },

    #[error("non-finite gradient for parameter `{param}`; step rejected")]
    NonFiniteGradient { param: String },

    #[error("non-deterministic function: repeated evaluation produced different values ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("class count mismatch: {0}")]
    ClassCountMismatch(String),

    #[error("checkpoint incompatible: {0}")]
    IncompatibleCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code for CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidConfig(_) => "invalid_config",
            Error::BadMagic { .. } => "bad_magic",
            Error::BadVersion { .. } => "bad_version",
            Error::TruncatedPayload { .. } => "truncated_payload",
            Error::ExtentMismatch { .. } => "extent_mismatch",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::NonDeterministic { .. } => "non_deterministic",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::ClassCountMismatch(_) => "class_count_mismatch",
            Error::IncompatibleCheckpoint(_) => "incompatible_checkpoint",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(axis: &str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        axis: axis.to_string(),
        detail: detail.into(),
    }
}
