use thiserror::Error;

/// Errors produced by the selective saliency pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("node {0} has degree zero; normalized adjacency is undefined")]
    IsolatedNode(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("saliency map is constant; min-max normalization is undefined")]
    DegenerateSaliency,
    #[error("salient or non-salient node set is empty")]
    EmptySide,
    #[error("test direction has zero variance under the covariance model")]
    ZeroVariance,
    #[error("parametric search stalled at z = {0}")]
    SearchStalled(f64),
    #[error("cholesky factorization failed: matrix is not positive definite")]
    CholeskyFailure,
    #[error("cannot place {edges} edges on {nodes} nodes without isolated nodes")]
    InfeasibleDegree { nodes: usize, edges: usize },
    #[error("noise calibration failed: {0}")]
    CalibrationFailed(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
