use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the engine core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A kernel received operands whose shapes do not conform.
    Shape {
        kernel: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    /// A kernel produced a NaN or infinite value.
    NonFinite { kernel: &'static str },
    /// A caller violated an operation precondition.
    Contract(String),
    /// A numeric failure that is not tied to a single kernel.
    Numeric(String),
    /// An example id is not present in the backing store.
    MissingExample { id: u64 },
    /// Some categories have fewer examples than requested.
    InsufficientSupport {
        needed: usize,
        deficient: Vec<(usize, usize)>,
    },
    /// The generator configuration cannot be realised.
    Infeasible(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { kernel, shapes } => {
                write!(f, "dimension error in `{kernel}`: operand shapes {shapes:?}")
            }
            Error::NonFinite { kernel } => write!(f, "non-finite value produced by `{kernel}`"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::MissingExample { id } => write!(f, "missing example id {id}"),
            Error::InsufficientSupport { needed, deficient } => {
                write!(f, "need {needed} examples per category; deficient (category, count):")?;
                for (c, n) in deficient {
                    write!(f, " ({c}, {n})")?;
                }
                Ok(())
            }
            Error::Infeasible(msg) => write!(f, "infeasible configuration: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(kernel: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            kernel,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }
}
