use thiserror::Error;

use crate::solver::ConvergenceTrace;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid quotes: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no implied volatility: {0}")]
    NoSolution(String),

    #[error("prior fit failed: {0}")]
    Fit(String),

    #[error("call matrix is singular (duplicate strikes?)")]
    SingularCallMatrix,

    #[error("discretization failed: {0}")]
    Discretization(String),

    /// The dual objective is running off to minus infinity: the quotes are
    /// not attainable from the conditioning marginal.
    #[error("arbitrage suspected at maturity {maturity}: {detail}")]
    ArbitrageSuspected {
        maturity: f64,
        detail: String,
        trace: Box<ConvergenceTrace>,
    },

    #[error("not converged at maturity {maturity} after {iterations} iterations (|grad| = {grad_inf:e})")]
    NotConverged {
        maturity: f64,
        iterations: usize,
        grad_inf: f64,
        trace: Box<ConvergenceTrace>,
    },

    #[error("solver failure at maturity {maturity}: {detail}")]
    Solver { maturity: f64, detail: String },

    #[error("surface file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
