use alloc::string::String;
use core::fmt;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible; `detail` names the offending dimension.
    Shape { op: &'static str, detail: String },
    /// A threshold schedule violates its invariants.
    InvalidSchedule(String),
    /// An argument is outside the accepted domain.
    InvalidArgument { what: &'static str, detail: String },
    /// The network description is not a valid encoder-decoder graph.
    InvalidNetwork(String),
    /// Every activation recorded for a layer was zero.
    DeadLayer { layer: usize, name: String },
    /// A loss, current or gradient became NaN or infinite.
    NonFinite { context: String },
    /// A class label is not below the number of classes.
    LabelOutOfRange { label: usize, num_classes: usize },
    /// A required entry is absent (parameter, statistic, trace field).
    Missing(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::InvalidSchedule(d) => write!(f, "invalid threshold schedule: {d}"),
            Error::InvalidArgument { what, detail } => write!(f, "invalid {what}: {detail}"),
            Error::InvalidNetwork(d) => write!(f, "invalid network: {d}"),
            Error::DeadLayer { layer, name } => {
                write!(f, "layer {layer} ({name}) produced only zero activations")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            Error::Missing(what) => write!(f, "missing {what}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

pub(crate) fn arg_err(what: &'static str, detail: String) -> Error {
    Error::InvalidArgument { what, detail }
}
