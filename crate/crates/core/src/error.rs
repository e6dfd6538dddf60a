use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("softmax row {row} has no unmasked entries")]
    EmptySoftmaxRow { row: usize },

    #[error("zero-norm row {row} in cosine similarity")]
    ZeroNorm { row: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("corrupt tensor file {path}: {reason}")]
    CorruptTensor { path: PathBuf, reason: String },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("architecture hash mismatch: checkpoint has {found}, model expects {expected}")]
    ArchMismatch { expected: String, found: String },

    #[error("step {step}, layer {layer}: {source}")]
    AtLayer {
        step: usize,
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_layer(self, step: usize, layer: usize) -> Self {
        match self {
            // keep the innermost context
            e @ Error::AtLayer { .. } => e,
            e => Error::AtLayer {
                step,
                layer,
                source: Box::new(e),
            },
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidArgument(format!($($arg)*)) };
}
pub(crate) use invalid;
pub(crate) use shape_err;
