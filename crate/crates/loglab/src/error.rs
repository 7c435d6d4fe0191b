use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("quadrature did not reach tolerance {tol:e} (estimated error {achieved:e})")]
    Quadrature { tol: f64, achieved: f64 },
    #[error("covariance factorization failed at pivot {row}; closest earlier point is {partner} (distance {distance:e})")]
    Factorization { row: usize, partner: usize, distance: f64 },
    #[error("size guard: {0}")]
    SizeGuard(String),
    #[error("overflow: {0}")]
    Overflow(String),
    #[error("geometry precondition: {0}")]
    Geometry(String),
    #[error("no admissible refinement: {0}")]
    Refinement(String),
    #[error("unreachable target in shortest-path search")]
    Unreachable,
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Domain(msg.into()))
}
