use thiserror::Error;

/// Error type shared by every module in this crate.
///
/// Variants map onto the failure classes the public operations promise:
/// dimension errors carry both offending shapes, input/config/contract
/// errors carry a human-readable description, and io/format errors cover
/// the on-disk artifacts (datasets, checkpoints, logs).
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    Shape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dim {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn shape(op: &'static str, shape: &[usize], reason: impl Into<String>) -> Self {
        Error::Shape {
            op,
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }
}
