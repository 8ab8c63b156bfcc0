//! Error type shared by every module in this crate.
//!
//! All fallible operations return [`Result`]. Variants are grouped by failure
//! class rather than by module so callers can match on the kind of problem
//! (bad shapes, rank collapse, failed factorization, protocol misuse) without
//! caring where it surfaced.

/// Crate-wide error.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// Operand dimensions are incompatible.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// Input is rank-deficient where full rank is required. `column` names
    /// the first offending column.
    #[error("rank degeneracy in {op}: column {column} has pivot magnitude {pivot:.3e}")]
    Degenerate {
        op: &'static str,
        column: usize,
        pivot: f64,
    },

    /// A factorization or scalar guard failed (non-positive pivot,
    /// asymmetric input, degenerate normalization).
    #[error("numerical failure in {op}: {details}")]
    Numerical { op: &'static str, details: String },

    /// The caller broke a sequencing or usage contract.
    #[error("protocol violation in {op}: {details}")]
    Protocol { op: &'static str, details: String },

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {op}: {details}")]
    NonFinite { op: &'static str, details: String },

    /// Invalid experiment or module configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Checkpoint or report I/O failed.
    #[error("io failure in {op}: {details}")]
    Io { op: &'static str, details: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn numerical(op: &'static str, details: impl Into<String>) -> Self {
        Error::Numerical {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn protocol(op: &'static str, details: impl Into<String>) -> Self {
        Error::Protocol {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn non_finite(op: &'static str, details: impl Into<String>) -> Self {
        Error::NonFinite {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn io(op: &'static str, details: impl Into<String>) -> Self {
        Error::Io {
            op,
            details: details.into(),
        }
    }
}
