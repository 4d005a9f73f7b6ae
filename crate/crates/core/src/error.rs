use thiserror::Error;

/// Failures while evaluating a problem or drawing from its gradient oracle.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("non-finite {component} at the evaluation point")]
    NonFinite { component: &'static str },
    #[error("{component} has dimension {got}, expected {expected}")]
    Dimension {
        component: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Failures of the KKT machinery.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KktError {
    #[error("constraint Jacobian is rank deficient (sigma_min = {sigma_min:e}, sigma_max = {sigma_max:e})")]
    RankDeficient { sigma_min: f64, sigma_max: f64 },
    #[error("reduced Hessian Z^T H Z is not positive definite (curvature assumption violated)")]
    IndefiniteReducedHessian,
    #[error("Hessian is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("step is inconsistent with the linearized constraints (|Jd + c| = {0:e})")]
    Inconsistent(f64),
}

/// Failures while reading data or building problem instances.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("constraint matrix failed the full-row-rank check after {0} draws")]
    RankCheck(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures of a solver run.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("iteration {iteration}: {source}")]
    Kkt { iteration: usize, source: KktError },
    #[error("iteration {iteration}: {source}")]
    Problem {
        iteration: usize,
        source: ProblemError,
    },
    #[error("iteration {iteration}: iterate became non-finite")]
    NonFiniteIterate { iteration: usize },
}

/// Failures of the experiment harness.
#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("reference solve stopped at residual {residual:e} after {iterations} iterations (tolerance {tol:e})")]
    Reference { residual: f64, iterations: usize, tol: f64 },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
