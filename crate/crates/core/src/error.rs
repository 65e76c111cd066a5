use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain where an operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two consecutive points of a path (or grid edge) are too far apart to lift uniquely.
    #[error("lift ambiguity between {from} and {to}: coordinate step {step:.6} exceeds 1/4")]
    LiftAmbiguity { from: usize, to: usize, step: f64 },

    /// A required piece of bookkeeping is missing.
    #[error("contract error: {0}")]
    Contract(String),

    /// Explicit step size above the parabolic stability bound.
    #[error("CFL violated: dt = {dt:e} exceeds the stable bound {required_dt:e}")]
    Cfl { dt: f64, required_dt: f64 },

    /// Invalid configuration or construction parameters.
    #[error("invalid spec: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
