use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VimError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value in {tensor}{}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        tensor: String,
        step: Option<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown unary function `{0}`")]
    UnknownUnary(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("training aborted at epoch {epoch}, batch {batch}: non-finite loss")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl VimError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VimError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        VimError::InvalidArgument(msg.into())
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"VIMC\"")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("payload length mismatch: manifest declares {expected} bytes, file holds {found}")]
    PayloadLength { expected: u64, found: u64 },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("checkpoint does not match model configuration; mismatched tensors: {}", .mismatched.join(", "))]
    Mismatch { mismatched: Vec<String> },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}: directory contains no class folders")]
    NoClasses(PathBuf),

    #[error("{0}: class folder contains no images")]
    EmptyClass(PathBuf),

    #[error("{path}: unreadable image: {reason}")]
    Unreadable { path: PathBuf, reason: String },

    #[error("image must be single-channel, got {0} channels")]
    NotGrayscale(usize),

    #[error("image has zero area ({width}x{height})")]
    ZeroArea { width: usize, height: usize },

    #[error("split ratios {0:?} must each lie in [0, 1] and sum to 1")]
    Ratios([f64; 3]),

    #[error("sample `{0}` not present in dataset")]
    UnknownSample(String),

    #[error("sample `{0}` missing from predictions")]
    MissingSample(String),
}
