use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("cannot reduce over empty axis {axis} of shape {shape:?}")]
    EmptyAxis { axis: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("kernel size must be odd, got {0}x{1}")]
    EvenKernel(usize, usize),
    #[error("backward root must be scalar-shaped, got {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward root is not tracked on the tape")]
    DetachedRoot,
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("extent {extent} is not divisible by sampling factor {factor}{}", tier.map(|t| format!(" (tier {t})")).unwrap_or_default())]
    IndivisibleExtent { extent: usize, factor: i32, tier: Option<usize> },
    #[error("sampling factor must be non-zero")]
    ZeroFactor,
    #[error("duplicate operator name '{0}'")]
    DuplicateName(String),
    #[error("operator contract violated: {0}")]
    ShapeContractViolation(String),
    #[error("operator set index {index} out of range (valid: 0..{len})")]
    UnknownOperatorSet { index: usize, len: usize },
    #[error("unknown optimizer '{0}' (supported: sgd, adam)")]
    UnknownOptimizer(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(usize),
    #[error("non-finite loss at run {run}, epoch {epoch}")]
    NonFiniteLoss { run: usize, epoch: usize },
    #[error("target is constant; signal variance is zero")]
    ConstantTarget,
    #[error("unknown metric '{0}'")]
    UnknownMetric(String),
    #[error("corrupt state: {0}")]
    CorruptState(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("missing pair for image id '{0}'")]
    MissingPair(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Validation { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
