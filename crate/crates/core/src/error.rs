//! Error types shared by registration, metrics, and file I/O.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value or algorithm parameter is outside its valid range.
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// Input data violates a precondition (shape, emptiness, labeling).
    #[error("invalid input: {0}")]
    Input(String),

    /// Point sets with incompatible dimensions.
    #[error("dimension mismatch: expected D={expected}, got D={actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// The M-step linear system could not be solved to tolerance.
    ///
    /// `iteration` is the 1-based EM iteration, or 0 when the solve was
    /// invoked outside a registration loop. `condition` is a cheap estimate
    /// from the ratio of extreme LU pivots.
    #[error("numerical failure at iteration {iteration}: {detail} (condition estimate {condition:.3e})")]
    Numerical {
        iteration: usize,
        condition: f64,
        detail: String,
    },

    /// Every responsibility vanished; the mixture explains all points as noise.
    #[error("degenerate posterior: total responsibility is zero")]
    DegeneratePosterior,

    /// A cluster holds data points but no template points to carry them.
    #[error("degenerate cluster {cluster}: data points present but no template points")]
    DegenerateCluster { cluster: usize },

    /// A file failed to parse.
    #[error("parse error in {} line {line}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// An I/O failure, with the offending path attached.
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parameter(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    /// Attach an EM iteration index to a numerical error raised inside a solver step.
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            Error::Numerical {
                condition, detail, ..
            } => Error::Numerical {
                iteration,
                condition,
                detail,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
