use thiserror::Error;

use crate::linsolve::SolveError;
use crate::metrics::RunRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected_cols}x{expected_rows} cells, got {cols}x{rows}")]
    Dimension {
        expected_cols: usize,
        expected_rows: usize,
        cols: usize,
        rows: usize,
    },

    #[error("nonpositive permeability {value} at cell {cell}")]
    NonpositivePermeability { cell: usize, value: f64 },

    #[error("negative contact coefficient {value} at node {node}")]
    NegativeCoefficient { node: usize, value: f64 },

    #[error(transparent)]
    Solve(#[from] SolveError),

    /// The outer iteration hit its cap. The partial record is kept so callers can flush it.
    #[error("no convergence after {iterations} iterations (last update {last_update:e})")]
    NonConvergence {
        iterations: usize,
        last_update: f64,
        record: Box<RunRecord>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
