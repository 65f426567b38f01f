use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The problem file is not well-formed JSON or does not match the schema.
    #[error("parse error at `{path}` (line {line}, column {column}): {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    /// The problem parsed but violates one or more invariants.
    #[error("invalid problem: {}", format_violations(.0))]
    Invalid(Vec<Violation>),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("problem is infeasible (primal residual {:.3e}, {} iterations)", .0.primal_residual, .0.iterations)]
    Infeasible(Box<crate::synthesis::SolverStats>),

    #[error("solver did not converge in {} iterations (primal residual {:.3e}, dual residual {:.3e})", .0.iterations, .0.primal_residual, .0.dual_residual)]
    SolverFailure(Box<crate::synthesis::SolverStats>),

    #[error(transparent)]
    Qp(#[from] crate::qp::QpError),

    #[error("cannot read `{path}`: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| format!("[{}] {}", v.code.as_str(), v.message))
        .collect::<Vec<_>>()
        .join("; ")
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
