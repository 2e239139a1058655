use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("mask entries must be 0 or 1 (found {0})")]
    NonBinary(f64),

    #[error("input is not sorted by timestamp: {0}")]
    Unsorted(&'static str),

    #[error("year {0} is not covered by any split rule")]
    UncoveredYear(i32),

    #[error("no clock-hour bucket holds at least 3 acquisitions")]
    SampleUnavailable,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: Vec<u8> },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated input: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("digest mismatch: expected {expected:016x}, computed {computed:016x}")]
    DigestMismatch { expected: u64, computed: u64 },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Stable variant name for machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::NonFinite(_) => "non_finite",
            Error::Contract(_) => "contract",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::NonBinary(_) => "non_binary",
            Error::Unsorted(_) => "unsorted",
            Error::UncoveredYear(_) => "uncovered_year",
            Error::SampleUnavailable => "sample_unavailable",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Truncated { .. } => "truncated",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::Malformed { .. } => "malformed",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
