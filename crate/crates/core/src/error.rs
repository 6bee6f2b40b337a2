use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("topology is not connected ({components} components over {agents} agents)")]
    DisconnectedGraph { agents: usize, components: usize },

    #[error("agent {agent} has zero self-weight")]
    ZeroSelfWeight { agent: usize },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid combination matrix: {0}")]
    InvalidMatrix(String),

    #[error("power iteration did not converge within {iterations} steps")]
    ConvergenceFailure { iterations: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("perturbation plan does not match the combination matrix: {0}")]
    StructureMismatch(String),

    #[error("noise scale is zero: privacy loss is unbounded")]
    ZeroScale,

    #[error("no histogram bin holds enough mass for a density-ratio estimate")]
    InsufficientMass,

    #[error(
        "centroid invariant violated at iteration {iteration}: relative residual {residual:e}"
    )]
    CentroidDrift { iteration: usize, residual: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(
        "unknown sweep parameter `{0}` (expected one of mu, b_v, sigma_p2, K, lambda2_target)"
    )]
    UnknownParameter(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
