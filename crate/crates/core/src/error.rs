use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the named primitive.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A primitive produced NaN or infinity.
    NonFinite { op: &'static str },
    /// A recurrent rollout produced a non-finite state at time step `step`.
    Divergence { step: usize, op: &'static str },
    /// `backward` was asked to differentiate a non-scalar node.
    NonScalarLoss { shape: Vec<usize> },
    /// Empty sequence where at least one step is needed.
    EmptySequence,
    InvalidArgument(String),
    InvalidConfig(String),
}

impl Error {
    /// Re-tags a numeric failure as a divergence at time step `step`.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::NonFinite { op } => Error::Divergence { step, op },
            other => other,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "shape mismatch in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::Divergence { step, op } => {
                write!(f, "rollout diverged at t={step} (non-finite value in {op})")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "loss node must be scalar, got shape {shape:?}")
            }
            Error::EmptySequence => f.write_str("sequence must contain at least one step"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
