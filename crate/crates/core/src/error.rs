//! Shared error type. NaN/Inf is always an error condition, never silent.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shape disagreement.
    Dim(String),
    /// An operation produced NaN or Inf.
    NonFinite(String),
    /// Argument outside its mathematical domain (e.g. t outside [0,1]).
    Domain(String),
    /// Caller violated an operation precondition.
    Contract(String),
    /// Model or run configuration is unusable (e.g. classifier head missing).
    Config(String),
    /// ODE state left the trust region during integration.
    Blowup { step: usize, max_abs: f64 },
    /// Text ingestion failure, 1-based line number.
    Parse { line: usize, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(d) => write!(f, "dimension error: {d}"),
            Error::NonFinite(d) => write!(f, "non-finite value: {d}"),
            Error::Domain(d) => write!(f, "domain error: {d}"),
            Error::Contract(d) => write!(f, "contract violation: {d}"),
            Error::Config(d) => write!(f, "configuration error: {d}"),
            Error::Blowup { step, max_abs } => {
                write!(f, "integration blow-up at step {step} (max |x| = {max_abs:e})")
            }
            Error::Parse { line, detail } => write!(f, "parse error at line {line}: {detail}"),
        }
    }
}

impl core::error::Error for Error {}
