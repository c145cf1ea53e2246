use std::path::PathBuf;

/// Errors raised by the depthseg pipeline.
///
/// Variants are grouped by [`ErrorClass`] so the CLI can map them onto
/// stable exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing pseudo-label for tile `{0}`")]
    MissingLabel(String),

    #[error("illegal class value {value} in {context}")]
    IllegalClass { value: u8, context: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("cannot read or write `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error for `{path}`: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error families, each with a fixed process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Internal,
    Config,
    Data,
    Divergence,
    Metric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Internal => 1,
            ErrorClass::Config => 3,
            ErrorClass::Data => 4,
            ErrorClass::Divergence => 5,
            ErrorClass::Metric => 6,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Checkpoint(_) => ErrorClass::Config,
            Error::Input(_)
            | Error::MissingLabel(_)
            | Error::IllegalClass { .. }
            | Error::ShapeMismatch(_)
            | Error::Io { .. }
            | Error::Image { .. } => ErrorClass::Data,
            Error::Divergence { .. } => ErrorClass::Divergence,
            Error::UndefinedMetric(_) | Error::UndefinedLoss(_) => ErrorClass::Metric,
            Error::Contract(_) | Error::Tensor(_) => ErrorClass::Internal,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
