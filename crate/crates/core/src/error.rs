use thiserror::Error;

/// Errors raised by the reconstruction pipelines and their numerical kernels.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("ill-posed problem: {0}")]
    IllPosed(String),
    #[error("infeasible problem: {0}")]
    Infeasible(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("degenerate pose for image {image}: {reason}")]
    DegeneratePose { image: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_check(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(what()))
    }
}
