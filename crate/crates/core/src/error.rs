//! Error type shared by every module of the crate.

use thiserror::Error;

use crate::vector::Vector;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The eigen-solver hit its iteration cap. `best` is the last unit
    /// iterate and `estimate` its Rayleigh quotient.
    #[error("power iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    ConvergenceFailure {
        iterations: usize,
        residual: f64,
        estimate: f64,
        best: Vector,
    },

    #[error("sample budget exhausted{}: requested {requested}, remaining {remaining}", client_label(.client))]
    BudgetExhausted {
        client: Option<usize>,
        requested: usize,
        remaining: usize,
    },

    #[error("privacy accounting violation: {0}")]
    AccountingViolation(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn client_label(client: &Option<usize>) -> String {
    match client {
        Some(j) => format!(" on client {j}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
