use std::path::PathBuf;

use crate::certificate::Condition;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    /// The lower-level Hessian failed to factor as symmetric positive definite.
    #[error("matrix is not symmetric positive definite (failed at index {index})")]
    SingularHessian { index: usize },

    #[error("{what} did not converge within {iterations} iterations")]
    NotConverged {
        what: &'static str,
        iterations: usize,
    },

    #[error("operation requires ground truth (ω*, v*) that the oracle does not provide")]
    MissingGroundTruth,

    #[error("iterates became non-finite; last finite step {last_finite_step}")]
    DivergenceDetected { last_finite_step: usize },

    #[error("inner loop at outer step {outer_step} exceeded {inner_iters} iterations")]
    InnerStall { outer_step: usize, inner_iters: usize },

    #[error("not enough decay to fit a rate ({points} points in window)")]
    InsufficientDecay { points: usize },

    #[error("step sizes outside the certified region: {}", join_conditions(.violated))]
    StepSizeInfeasible { violated: Vec<Condition> },

    #[error("multiplier construction violates {condition}")]
    MultiplierInfeasible { condition: Condition },

    #[error("sector transform is not real: {0}")]
    TransformInfeasible(String),

    #[error("scaled system is unstable: |pole| = {pole} >= rho = {rho}")]
    UnstableScaledSystem { pole: f64, rho: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
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

fn join_conditions(conds: &[Condition]) -> String {
    conds
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}
