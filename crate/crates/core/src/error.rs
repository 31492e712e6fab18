use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("simulated state became non-finite at step {step}; the step size is probably too large")]
    NonFiniteState { step: usize },

    #[error("time {tau} is outside the open interval (0, {horizon})")]
    OutOfRange { tau: f64, horizon: f64 },

    #[error("asset {asset_id} has {count} observations, at least 2 are required")]
    EmptySeries { asset_id: usize, count: usize },

    #[error("invalid tick series: {0}")]
    InvalidSeries(String),

    #[error("no observation falls inside the kernel window at any grid point")]
    DegenerateWindow,

    #[error("every bandwidth candidate leaves more than half of the evaluation points without data")]
    AllDegenerate,

    #[error("tau = {tau} lies outside [h, T - h] = [{lower}, {upper}]")]
    OutOfBandwidthRange { tau: f64, lower: f64, upper: f64 },

    #[error("largest eigenvalue is zero; factor number undefined")]
    AllZero,

    #[error("symmetric eigensolver did not converge{}", .tau.map(|t| format!(" at tau = {t}")).unwrap_or_default())]
    EigenFailure { tau: Option<f64> },

    #[error("diagonal entry {index} is {value}, correlation-scaled thresholds need a positive diagonal")]
    NonPositiveDiagonal { index: usize, value: f64 },

    #[error("no threshold constant in range yields a positive definite matrix")]
    NoPdInRange,

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("inner Woodbury matrix is numerically singular (condition number {condition:e})")]
    SingularInner { condition: f64 },

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPd { min_eigenvalue: f64 },

    #[error("input grid is ragged: row {row} has {found} entries, expected {expected}")]
    RaggedInput { row: usize, expected: usize, found: usize },

    #[error("asset {asset_id}: {source}")]
    Asset {
        asset_id: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn for_asset(self, asset_id: usize) -> Self {
        Error::Asset {
            asset_id,
            source: Box::new(self),
        }
    }

    pub(crate) fn shape(expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            found: found.into(),
        }
    }

    /// True for errors caused by bad input rather than a numerical or I/O
    /// failure during computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidConfig(_)
            | Error::OutOfRange { .. }
            | Error::InvalidSeries(_)
            | Error::OutOfBandwidthRange { .. }
            | Error::ShapeMismatch { .. }
            | Error::Parse { .. }
            | Error::RaggedInput { .. } => true,
            Error::Asset { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
