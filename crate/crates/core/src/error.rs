//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by every module of the simulator.
///
/// Contract violations (bad shapes, out-of-range ratios, frozen-parameter
/// misuse) are reported rather than panicking so the CLI can exit with a
/// message.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {layer}: expected {expected}, got {actual}")]
    Shape {
        layer: String,
        expected: String,
        actual: String,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
    #[error("unknown {kind}: {value}")]
    Unknown { kind: &'static str, value: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(
        layer: impl Into<String>,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            layer: layer.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
