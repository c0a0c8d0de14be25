use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("column indices overlap: {columns:?}")]
    OverlappingColumns { columns: Vec<usize> },

    #[error("column index {index} out of range (file has {ncols} columns)")]
    ColumnOutOfRange { index: usize, ncols: usize },

    #[error("non-numeric value {value:?} at row {row}, column {col}")]
    NonNumeric {
        row: usize,
        col: usize,
        value: String,
    },

    #[error("invalid {family} response {value} at row {row}")]
    InvalidResponse {
        row: usize,
        value: f64,
        family: &'static str,
    },

    #[error("candidate column {name:?} has zero variance")]
    ConstantColumn { name: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("dataset has no grouping column")]
    MissingGroup,

    #[error("random slope requested but dataset has no slope covariate")]
    MissingSlope,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure in {context}: {detail}")]
    Numerical {
        context: &'static str,
        detail: String,
    },

    #[error("{context} did not converge after {iterations} iterations (best objective {best:.6})")]
    NonConvergence {
        context: &'static str,
        iterations: usize,
        best: f64,
        best_point: Vec<f64>,
    },

    #[error("random-effects refit failed at outer iteration {iteration} (last good selection {last_selected:?}): {source}")]
    OuterLoop {
        iteration: usize,
        last_selected: Vec<usize>,
        last_u_hat: Vec<f64>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn numerical(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context,
            detail: detail.into(),
        }
    }

    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical { .. } | Error::NonConvergence { .. } => true,
            Error::OuterLoop { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
