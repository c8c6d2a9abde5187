use thiserror::Error;

/// Errors produced by the separation engine and its surrounding tooling.
#[derive(Debug, Error)]
pub enum CorssError {
    #[error("invalid-channel-count: need at least 2 channels, got {0}")]
    InvalidChannelCount(usize),
    #[error("schedule-out-of-range: {0}")]
    ScheduleOutOfRange(String),
    #[error("invalid-nonlinearity: {0}")]
    InvalidNonlinearity(String),
    #[error("non-finite-sample: input contains a non-finite value")]
    NonFiniteSample,
    #[error("shape-error: {0}")]
    ShapeError(String),
    #[error("divergence: state matrix entry exceeded {limit:.0e} at sample {sample}")]
    Divergence { limit: f64, sample: u64 },
    #[error("singular-update: denominator within epsilon of zero at sample {0}")]
    SingularUpdate(u64),
    #[error("degenerate-block: every sample in the block was skipped")]
    DegenerateBlock,
    #[error("degenerate-matrix: {0}")]
    DegenerateMatrix(String),
    #[error("undefined-normalization: reference is all zero")]
    UndefinedNormalization,
    #[error("undefined-correlation: series is constant")]
    UndefinedCorrelation,
    #[error("empty-input: {0}")]
    EmptyInput(String),
    #[error("invalid-spec: {0}")]
    InvalidSpec(String),
    #[error("stream-corrupt: {0}")]
    StreamCorrupt(String),
    #[error("unavailable-metric: {0}")]
    UnavailableMetric(String),
    #[error("format-error: {0}")]
    FormatError(String),
    #[error("io-error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json-error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CorssError>;
