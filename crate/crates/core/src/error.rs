use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected}, got {actual}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        actual: String,
    },

    #[error("stale forward result: {0}")]
    StaleForward(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("bad magic: expected \"HSDT\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("cifar file of {size} bytes is not a multiple of 3073; partial record at byte offset {offset}")]
    CifarSize { size: usize, offset: usize },

    #[error("clustering needs at least 2 vectors, got {0}")]
    TooFewVectors(usize),

    #[error("no iscv matrix for layer {0}")]
    MissingIscv(usize),

    #[error("class {class} has no samples in the iscv matrix for layer {layer}")]
    AbsentClass { class: usize, layer: usize },

    #[error("decomposition aborted at node {node}: {reason}")]
    Decomposition { node: usize, reason: String },

    #[error("transfer failed on edge {edge}: {reason}")]
    Transfer { edge: String, reason: String },

    #[error("invalid class subset: {0}")]
    InvalidSubset(String),

    #[error("empty evaluation set")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            layer: layer.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
