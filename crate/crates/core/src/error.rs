//! Crate-wide error type.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor, network, and solver code.
#[derive(Debug)]
pub enum Error {
    /// Dimensions of an argument do not match what the operation requires.
    Shape(String),
    /// A configuration value is out of range or inconsistent.
    Config(String),
    /// A serialized tensor, model, or dataset file is malformed.
    Format(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// An operation is outside the supported domain (e.g. entrywise norms
    /// with p < 1, or explicit matrices beyond the size guard).
    Unsupported(String),
    /// Power iteration did not reach the requested tolerance; carries the
    /// last estimate so callers can still inspect it.
    NoConvergence { estimate: f64, iterations: usize },
    /// An integrator state stopped being finite at the given step.
    Diverged { step: usize },
    /// A constraint that a layer relies on was violated (e.g. a negative
    /// entry in a filter that must be elementwise nonnegative).
    Constraint(String),
    /// Failure inside a specific network layer.
    Layer { index: usize, source: Box<Error> },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Unsupported(msg) => write!(f, "unsupported: {msg}"),
            Error::NoConvergence {
                estimate,
                iterations,
            } => write!(
                f,
                "power iteration did not converge after {iterations} iterations (last estimate {estimate})"
            ),
            Error::Diverged { step } => write!(f, "state became non-finite at step {step}"),
            Error::Constraint(msg) => write!(f, "constraint violation: {msg}"),
            Error::Layer { index, source } => write!(f, "layer {index}: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            Error::Layer { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl Error {
    /// Attach a layer index to an error bubbling out of a network pass.
    pub fn at_layer(self, index: usize) -> Self {
        Error::Layer {
            index,
            source: Box::new(self),
        }
    }
}
