use std::fmt;

/// Error taxonomy shared across the crate.
///
/// Variants map one-to-one onto the failure classes the operations can hit:
/// shape mismatches, out-of-range labels, violated input contracts, degenerate
/// numeric inputs, bad call sequencing, invalid configuration, malformed files,
/// empty reduction domains, incompatible artifacts, and runtime training
/// failures (NaN loss, degenerate selections).
#[derive(Debug)]
pub enum Error {
    /// Dimension mismatch between tensors.
    Shape(String),
    /// Index (e.g. class label) out of range.
    Index(String),
    /// Input violates a documented precondition (e.g. unnormalized rows).
    Validation(String),
    /// Numerically degenerate input (zero-norm vector, ...).
    Degenerate(String),
    /// Operation called in the wrong order.
    State(String),
    /// Invalid run or task configuration.
    Config(String),
    /// Malformed file content; carries what and where.
    Format(String),
    /// A reduction over an empty set was requested.
    EmptyDomain(String),
    /// Two artifacts cannot be compared (layer names/shapes differ).
    Incompatible(String),
    /// Training aborted (NaN loss, empty layer selection, ...).
    Training(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Degenerate(m) => write!(f, "degenerate input: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::EmptyDomain(m) => write!(f, "empty domain: {m}"),
            Error::Incompatible(m) => write!(f, "incompatible artifacts: {m}"),
            Error::Training(m) => write!(f, "training error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
