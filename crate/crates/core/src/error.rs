use alloc::string::String;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not agree.
    Shape(String),
    /// A configuration value is out of range or inconsistent.
    Config(String),
    /// A time step or element index is outside its valid range.
    Index(String),
    /// A non-finite value appeared in a computation.
    Numeric(String),
    /// Input data violates a data contract (empty group, zero variance, ...).
    Data(String),
    /// A lookup key was not found.
    Lookup(String),
    /// An operation was requested in a state that does not allow it.
    State(String),
    /// A metric is undefined for the given inputs.
    Metric(String),
    /// Montage geometry is invalid.
    Montage(String),
    /// Stored parameters do not match the requested configuration.
    Compatibility(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Lookup(m) => write!(f, "lookup error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Metric(m) => write!(f, "metric error: {m}"),
            Error::Montage(m) => write!(f, "montage error: {m}"),
            Error::Compatibility(m) => write!(f, "compatibility error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
