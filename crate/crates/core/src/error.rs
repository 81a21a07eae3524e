use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible with the operation.
    Shape { op: &'static str, detail: String },
    /// A NaN or infinity was produced while fault checks were enabled.
    NumericFault { op: &'static str, node: usize },
    /// A row with zero norm was passed to a normalizing op.
    Degenerate { op: &'static str, row: usize },
    /// Batch statistics need at least two values per channel.
    BatchTooSmall { per_channel: usize },
    /// `backward` was called on a tensor with more than one element.
    NonScalarLoss { numel: usize },
    /// Configuration values violate an invariant.
    Config(String),
    /// A parameter or buffer set does not match the model layout.
    Mismatch(String),
    /// Empty input where at least one element is required.
    Empty(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::NumericFault { op, node } => {
                write!(f, "{op}: non-finite value produced at node {node}")
            }
            Error::Degenerate { op, row } => write!(f, "{op}: row {row} has zero norm"),
            Error::BatchTooSmall { per_channel } => write!(
                f,
                "batch norm in train mode needs at least 2 values per channel, got {per_channel}"
            ),
            Error::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Mismatch(msg) => write!(f, "model mismatch: {msg}"),
            Error::Empty(what) => write!(f, "{what} is empty"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
