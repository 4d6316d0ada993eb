use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Failures raised by the scoring, selection and mixture-of-experts routines.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An input violates the mathematical domain of an operation
    /// (empty log-probability list, positive log-probability, NaN score, ...).
    Domain(String),
    /// Required records are missing. `missing` lists the offending ids.
    Incomplete { what: String, missing: Vec<String> },
    /// Two models or tensors cannot be compared or combined.
    Incompatible(String),
    /// A tensor or vector with zero norm where a direction is required.
    DegenerateTensor(String),
    /// A configuration or record failed validation.
    Validation(String),
    /// Requested more items than the pool holds.
    Budget { requested: usize, available: usize },
    /// Tuple enumeration would exceed the configured cap.
    EnumerationCap { count: u128, cap: u128 },
    /// A convex hull needs at least two anchor points.
    DegenerateHull { points: usize },
    /// Matrix or vector dimensions disagree.
    Shape(String),
    /// A non-finite value appeared; the string names where.
    NonFinite(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Incomplete { what, missing } => {
                write!(f, "incomplete {what}: missing {}", missing.join(", "))
            }
            Error::Incompatible(msg) => write!(f, "incompatible: {msg}"),
            Error::DegenerateTensor(msg) => write!(f, "degenerate tensor: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Budget { requested, available } => write!(
                f,
                "budget of {requested} exceeds the {available} available items"
            ),
            Error::EnumerationCap { count, cap } => write!(
                f,
                "refusing to enumerate {count} tuples (cap is {cap})"
            ),
            Error::DegenerateHull { points } => write!(
                f,
                "convex hull needs at least 2 points, got {points}"
            ),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::NonFinite(loc) => write!(f, "non-finite value at {loc}"),
        }
    }
}

impl core::error::Error for Error {}
