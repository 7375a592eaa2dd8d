use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected} data elements for shape {shape:?}, got {got}")]
    ShapeDataMismatch {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: tensor of rank {got} where rank {expected} is required")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward already ran on this tape; reset or build a new tape")]
    BackwardAlreadyRun,
    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("kernel {kernel}x{kernel} larger than padded input {padded}x{padded}")]
    KernelTooLarge { kernel: usize, padded: usize },
    #[error("{op}: invalid argument: {message}")]
    InvalidArgument { op: &'static str, message: String },

    // scale-shift algebra
    #[error("scale factor gamma[{index}] = {value} must be strictly positive")]
    NonPositiveGamma { index: usize, value: f64 },
    #[error("product of scale factors is {product}, must equal 1")]
    GammaProductNotOne { product: f64 },
    #[error("shift has {got} scale factors, network has {expected} weight layers")]
    GammaCountMismatch { expected: usize, got: usize },
    #[error("layer {index} has zero norm; the shift algebra is degenerate there")]
    ZeroNormLayer { index: usize },
    #[error("{op} does not support layer kind {kind}")]
    UnsupportedLayer { op: &'static str, kind: &'static str },

    // topology preconditions of the analysis routines
    #[error("{op} requires a plain dense/ReLU chain")]
    NotAnMlp { op: &'static str },
    #[error("residual chain depth {depth} exceeds {max} (expansion has 2^L terms)")]
    ResidualDepthTooLarge { depth: usize, max: usize },
    #[error("network has no dense head after the convolutional stack")]
    NoDenseHead,

    // dataset ingestion
    #[error("bad IDX magic: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("truncated IDX file: expected {expected} bytes of payload, got {got}")]
    TruncatedFile { expected: usize, got: usize },
    #[error("dataset count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    // training
    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },
    #[error("config field `{field}`: {message}")]
    ConfigInvalid { field: &'static str, message: String },

    #[error("weights container: {0}")]
    BadContainer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
