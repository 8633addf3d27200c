use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MillsError> = std::result::Result<T, E>;

/// Everything that can go wrong between reading a CSV and writing a summary.
///
/// Variants fall into three families which the CLI maps to distinct exit
/// codes: malformed input ([`MillsError::is_input_error`]), numerical or
/// invariant failures inside the samplers, and plain I/O.
#[derive(Debug, Error)]
pub enum MillsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure at iteration {iteration}, block {block}{}: {msg}", fmt_site(*.component, *.pair))]
    Numerical {
        iteration: usize,
        block: &'static str,
        component: Option<usize>,
        pair: Option<(usize, usize)>,
        msg: String,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_site(component: Option<usize>, pair: Option<(usize, usize)>) -> String {
    let mut s = String::new();
    if let Some(h) = component {
        s.push_str(&format!(", component {}", h + 1));
    }
    if let Some((j, k)) = pair {
        s.push_str(&format!(", pair ({},{})", j + 1, k + 1));
    }
    s
}

impl MillsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MillsError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        MillsError::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Malformed files, bad flags, shape mismatches between inputs.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            MillsError::InvalidInput(_)
                | MillsError::Data { .. }
                | MillsError::Dimension { .. }
                | MillsError::InvalidParameter(_)
                | MillsError::Precondition(_)
                | MillsError::Csv(_)
                | MillsError::Json(_)
        )
    }

    pub fn is_numerical_error(&self) -> bool {
        matches!(
            self,
            MillsError::Numerical { .. } | MillsError::Invariant(_)
        )
    }

    /// Attach an iteration/block site to an error raised inside an update step.
    pub(crate) fn at(
        self,
        iteration: usize,
        block: &'static str,
        component: Option<usize>,
        pair: Option<(usize, usize)>,
    ) -> Self {
        match self {
            MillsError::Numerical { msg, .. } => MillsError::Numerical {
                iteration,
                block,
                component,
                pair,
                msg,
            },
            other => MillsError::Numerical {
                iteration,
                block,
                component,
                pair,
                msg: other.to_string(),
            },
        }
    }
}
