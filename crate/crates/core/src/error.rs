use thiserror::Error;

use crate::assimilate::DescentReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("depth 1 + eta - beta became non-positive ({depth:.3e}) at level {level}, cell {cell}")]
    Drying { level: usize, cell: usize, depth: f64 },

    #[error("CFL violation at level {level}: courant number {courant:.3} exceeds {limit:.3}")]
    Stability { level: usize, courant: f64, limit: f64 },

    #[error("solution diverged (non-finite value) at level {level}")]
    Divergence { level: usize },

    #[error("line search stalled at iteration {iteration} after {halvings} halvings")]
    Stall {
        iteration: usize,
        halvings: usize,
        report: Box<DescentReport>,
    },

    #[error("degenerate direction: {0}")]
    Degenerate(String),

    #[error("operator is not positive definite: curvature {curvature:.3e} at CG iteration {iteration}")]
    NotPositiveDefinite {
        iteration: usize,
        curvature: f64,
        direction: Vec<f64>,
    },

    #[error("conjugate gradient did not converge in {iterations} iterations (final relative residual {final_residual:.3e})")]
    NonConvergence {
        iterations: usize,
        final_residual: f64,
        history: Vec<f64>,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("oracle failed at station {station}, time index {time}: {source}")]
    Oracle {
        station: usize,
        time: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidGrid(_) | Error::Domain(_) | Error::Alignment(_) => 2,
            Error::Drying { .. } | Error::Stability { .. } | Error::Divergence { .. } => 3,
            Error::Stall { .. } | Error::Precondition(_) | Error::Oracle { .. } => 4,
            Error::Degenerate(_) => 5,
            Error::NotPositiveDefinite { .. } | Error::NonConvergence { .. } => 6,
            Error::Io(_) => 1,
        }
    }
}
