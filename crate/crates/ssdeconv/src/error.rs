//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, estimation, and prediction.
#[derive(Debug, Error)]
pub enum Error {
    /// Parameter validation failure (dimensions, positivity, ranges).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A matrix that must be invertible is singular.
    #[error("singular matrix: {0}")]
    SingularMatrix(&'static str),

    /// The density has no finite value at the requested point.
    #[error("density unbounded here: {0}")]
    DensityUnbounded(String),

    /// Too few observations for the requested operation.
    #[error("series too short: n = {n}, need at least {min}")]
    SeriesTooShort { n: usize, min: usize },

    /// The measurement-noise characteristic function is numerically zero
    /// somewhere on the integration cube, so the Fourier weights blow up.
    /// Usually indicates a misconfigured noise family or bandwidth.
    #[error(
        "characteristic function vanishes on integration cube \
         (node {node}, |value| = {magnitude:.3e})"
    )]
    VanishingCharFn { node: usize, magnitude: f64 },

    /// The estimated transition matrix is too close to singular for the
    /// noise-density estimator (smallest singular value below threshold).
    #[error("estimated transition matrix is near singular (smallest singular value {smallest_sv:.3e})")]
    NearSingularTransition { smallest_sv: f64 },

    /// The CDF being searched never reaches the requested level.
    #[error("level unreachable: target {level}, reached {reached:.6} after {doublings} doublings")]
    LevelUnreachable {
        level: f64,
        reached: f64,
        doublings: u32,
    },

    /// The one-step prediction error covariance is singular.
    #[error("singular prediction error covariance at step {step}")]
    SingularErrorCovariance { step: usize },

    /// Malformed tabular input data.
    #[error("data error at line {line}: {message}")]
    Data { line: usize, message: String },

    /// An error raised inside replicate `replicate` of an experiment.
    #[error("replicate {replicate}: {source}")]
    Replicate {
        replicate: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported dimension {dim}: {context}")]
    UnsupportedDimension { dim: usize, context: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an error with the replicate index it occurred in.
    pub fn in_replicate(self, replicate: usize) -> Self {
        Error::Replicate {
            replicate,
            source: Box::new(self),
        }
    }
}
