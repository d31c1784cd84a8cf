use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("quantizer input out of range: {0}")]
    QuantRange(String),

    #[error("fixed-point accumulator overflow")]
    AccumulatorOverflow,

    #[error("layer `{0}` would be pruned to zero channels")]
    EmptyLayer(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite {term} loss at step {step}")]
    NonFinite { term: &'static str, step: usize },

    #[error("online update requested before the quantized branch was frozen")]
    NotFrozen,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

/// Checkpoint failures, each with a stable numeric code.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("payload length error: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },
    #[error("manifest/payload disagreement: {0}")]
    ManifestPayload(String),
    #[error("shape error for tensor `{name}`: manifest {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

impl CheckpointError {
    pub fn code(&self) -> u32 {
        match self {
            CheckpointError::BadMagic => 10,
            CheckpointError::Version { .. } => 11,
            CheckpointError::PayloadLength { .. } => 12,
            CheckpointError::ManifestPayload(_) => 13,
            CheckpointError::Shape { .. } => 14,
            CheckpointError::Manifest(_) => 15,
        }
    }
}

impl Error {
    /// True for errors caused by user-supplied configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
