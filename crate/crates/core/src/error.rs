use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("backward pass requested without a cached forward pass: {0}")]
    MissingForwardCache(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("linear system is singular: {0}")]
    Singular(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("solver diverged: {0}")]
    Divergence(String),

    #[error("value out of range for {kind} transform: {value}")]
    TransformDomain { kind: &'static str, value: f64 },

    #[error("inconsistent configuration: {0}")]
    Config(String),

    #[error("missing ClArC statistics for P-ClArC prediction")]
    MissingStats,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
