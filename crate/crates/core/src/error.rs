use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mesh has no panels")]
    EmptyMesh,
    #[error("mesh at level {0} carries no parent map")]
    MissingParents(usize),
    #[error("interpolation grid has duplicate points")]
    DuplicatePoints,
    #[error("cluster {0} has a degenerate measure")]
    DegenerateCluster(usize),
    #[error("structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("hierarchy mismatch: {0}")]
    HierarchyMismatch(String),
    #[error("matrix is not positive semidefinite: diagonal {value:e} at index {index}")]
    NotPositiveSemidefinite { index: usize, value: f64 },
    #[error("dense reconstruction of {size} unknowns exceeds the cap of {cap}")]
    OracleCap { size: usize, cap: usize },
    #[error("resource cap exceeded: {0}")]
    ResourceCap(String),
    #[error("no convergence after {iterations} iterations, last estimate {estimate:e}")]
    NoConvergence {
        iterations: usize,
        estimate: f64,
        vector: Vec<f64>,
    },
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
