use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolchain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest parse error: {0}")]
    Parse(String),

    #[error("layer {layer}: shape mismatch: {msg}")]
    Shape { layer: usize, msg: String },

    #[error("layer {layer}: invalid parameter: {msg}")]
    Invariant { layer: usize, msg: String },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("unsupported bit width {0} (expected 2, 4 or 8)")]
    BitWidth(u8),

    #[error("cannot decompose multiplier {0}: {1}")]
    Multiplier(f64, &'static str),

    #[error("layer {layer}: integer overflow: {msg}")]
    Overflow { layer: usize, msg: String },

    #[error("bit plan does not match graph: {0}")]
    Plan(String),

    #[error("infeasible allocation: {0}")]
    Infeasible(InfeasibleReport),

    #[error("input mismatch: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from malformed or inconsistent inputs.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Infeasible(_))
    }
}

/// Which memory constraint could not be met, and where.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct InfeasibleReport {
    /// "read-write" (activation budget) or "read-only" (parameter budget).
    pub constraint: &'static str,
    pub budget: u64,
    /// Offending layers as (layer index, footprint in bytes).
    pub violations: Vec<(usize, u64)>,
}

impl std::fmt::Display for InfeasibleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} budget of {} bytes exceeded", self.constraint, self.budget)?;
        for (layer, bytes) in &self.violations {
            write!(f, "; layer {layer} needs {bytes} bytes")?;
        }
        Ok(())
    }
}
