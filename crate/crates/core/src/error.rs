use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("input file is empty: {0}")]
    EmptyFile(String),
    #[error("duplicate cell for unit {unit} on {date}")]
    DuplicateCell { unit: String, date: String },
    #[error("unparseable date {0:?}")]
    UnparseableDate(String),
    #[error("unparseable value {value:?} in column {column}")]
    UnparseableValue { column: String, value: String },
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("invalid unit identifier {0:?}")]
    InvalidUnitId(String),
    #[error("unknown unit {0}")]
    UnknownUnit(String),
    #[error("no unit is present in every table")]
    EmptyIntersection,
    #[error("series has no valid cell")]
    AllMissing,
    #[error("population for band {0} must be positive")]
    NonPositivePopulation(String),
    #[error("derived count is negative at day {day} ({value})")]
    NegativeDerivedCount { day: usize, value: f64 },
    #[error("invalid age band {lb}..{ub:?}")]
    InvalidAgeBand { lb: u8, ub: Option<u8> },
    #[error("series of length {got} does not match expected length {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),

    #[error("invalid split: t_fit={t_fit}, T0={pre_len}")]
    InvalidSplit { t_fit: usize, pre_len: usize },
    #[error("empty window")]
    EmptyWindow,
    #[error("predictor {0} has zero variance across units")]
    ZeroVariancePredictor(String),
    #[error("unit {unit} has a missing outcome on day {day}")]
    MissingOutcome { unit: String, day: usize },
    #[error("invalid study: {0}")]
    InvalidStudy(String),

    #[error("pre-period RMSE is zero")]
    ZeroPreRmse,
    #[error("at least {needed} units are required, got {got}")]
    TooFewUnits { needed: usize, got: usize },

    #[error("series is degenerate: {0}")]
    DegenerateSeries(String),
    #[error("zero variance in {0}")]
    ZeroVariance(String),

    #[error("block {0} has no predictors")]
    EmptyBlock(String),
    #[error("unknown predictor {0}")]
    UnknownPredictor(String),
    #[error("unit {0} has no cluster label")]
    UnlabeledUnit(String),
    #[error("unknown cluster label {0:?}")]
    UnknownCluster(String),
    #[error("state of unit {0} is not covered by the adjacency map")]
    UnknownState(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
