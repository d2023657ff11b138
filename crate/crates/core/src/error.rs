use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("missing coupling matrix for primitive pair ({0}, {1})")]
    MissingCoupling(usize, usize),

    #[error("no valid continuation for token pair ({a}, {b})")]
    NoContinuation { a: usize, b: usize },

    #[error("mask projection did not converge after {iters} iterations (residual {residual:.3e})")]
    ProjectionFailed { iters: usize, residual: f64 },

    #[error("weight matrix is not positive definite; increase jitter (eps_pd = {eps_pd})")]
    NotPositiveDefinite { eps_pd: f64 },

    #[error("attention row {row} has every key forbidden")]
    DegenerateRow { row: usize },

    #[error("cannot split horizon {h} into {k} primitives of length {m}")]
    Partition { h: usize, k: usize, m: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown task '{0}'")]
    UnknownTask(String),

    #[error("planner failed after {0} layout resamples")]
    PlannerFailed(usize),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension { op, detail: detail.into() }
}
