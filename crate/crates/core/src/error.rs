//! Structured errors for shape and value contract violations.

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Rank or dimension disagreement; `msg` carries the offending shapes.
    Shape { op: &'static str, msg: String },
    /// Argument or numeric contract violation (NaN costs, degenerate boxes,
    /// out-of-range coordinates, ...).
    Value { op: &'static str, msg: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub fn value(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Value { op, msg: msg.into() }
    }

    pub fn op(&self) -> &'static str {
        match self {
            Error::Shape { op, .. } | Error::Value { op, .. } => op,
        }
    }
}

impl core::fmt::Display for Error {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Error::Shape { op, msg } => write!(f, "{op}: shape error: {msg}"),
            Error::Value { op, msg } => write!(f, "{op}: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

/// Renders a shape as `2x3x4` for error messages.
pub(crate) fn shape_str(shape: &[usize]) -> String {
    use core::fmt::Write;
    let mut s = String::new();
    for (i, d) in shape.iter().enumerate() {
        if i > 0 {
            s.push('x');
        }
        let _ = write!(s, "{d}");
    }
    s
}
