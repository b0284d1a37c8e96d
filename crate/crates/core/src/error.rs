use thiserror::Error;

/// Errors produced anywhere in the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter {0} lies outside [0, 1]")]
    Domain(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid knot vector: {0}")]
    InvalidKnots(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("point inversion failed on a watertight face (residual {residual:.3e}, tolerance {tol:.3e})")]
    InversionFailed { residual: f64, tol: f64 },
    #[error("Greville node {node:?} of patch {patch} lies on no adjacent face (closest distance {residual:.3e}, tolerance {tol:.3e})")]
    NodeOffInterface { patch: usize, node: [f64; 3], residual: f64, tol: f64 },
    #[error("interface configuration: {0}")]
    Interface(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("matrix is not positive definite (pivot {0})")]
    NotPositiveDefinite(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
