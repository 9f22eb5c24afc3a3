use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is {distance_m:.0} m from the tessellation origin (limit {limit_m:.0} m)")]
    OutOfRange { distance_m: f64, limit_m: f64 },

    #[error("cells belong to different tessellations: {0} vs {1}")]
    CityMismatch(String, String),

    #[error("parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("feature {index}: {message}")]
    Feature { index: usize, message: String },

    #[error("feature collection is empty")]
    EmptyCollection,

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{rejected} of {total} rows rejected (more than 10%); first: {first}")]
    Ingest {
        rejected: usize,
        total: usize,
        first: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("need at least {needed} calibration examples, got {got}")]
    InsufficientCalibration { needed: usize, got: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate sample: upper and lower quantiles coincide at {0}")]
    DegenerateSample(f64),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("need at least 2 groups, got {0}")]
    TooFewGroups(usize),

    #[error("need at least {needed} samples per group, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("need at least {needed} distinct hexes, got {got}")]
    TooFewHexes { needed: usize, got: usize },

    #[error("test hexes leaked into training: {0}")]
    Leakage(String),

    #[error("no cluster holds any delivery")]
    NoDeliveries,

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the error stems from user-supplied input or configuration
    /// rather than from a failure inside the computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Context { source, .. } => source.is_validation(),
            Error::Divergence(_) | Error::Shape { .. } | Error::Json(_) | Error::Leakage(_) => false,
            _ => true,
        }
    }
}
