//! Error type shared by every module in the core crate.

use alloc::string::String;
use core::fmt;

/// Errors raised by core operations.
///
/// `Shape` covers dimension mismatches, `Domain` covers numerically invalid
/// inputs (zero norms, non-stochastic rows, bad temperatures), `Schema`
/// covers metadata/vocabulary lookups, and `Config` covers structurally
/// invalid requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    Shape(String),
    Domain(String),
    Schema(String),
    Vocabulary(String),
    Config(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape(msg) => write!(f, "shape error: {msg}"),
            CoreError::Domain(msg) => write!(f, "domain error: {msg}"),
            CoreError::Schema(msg) => write!(f, "schema error: {msg}"),
            CoreError::Vocabulary(msg) => write!(f, "vocabulary error: {msg}"),
            CoreError::Config(msg) => write!(f, "config error: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

#[macro_export]
macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::CoreError::Shape(alloc::format!($($arg)*))
    };
}

#[macro_export]
macro_rules! domain_err {
    ($($arg:tt)*) => {
        $crate::error::CoreError::Domain(alloc::format!($($arg)*))
    };
}

#[macro_export]
macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::CoreError::Config(alloc::format!($($arg)*))
    };
}
