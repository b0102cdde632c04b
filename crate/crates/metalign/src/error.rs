//! Application error type with process exit-code mapping.

use metalign_core::CoreError;
use thiserror::Error;

/// Exit codes: 0 success, 1 validation error, 2 runtime failure,
/// 3 acceptance-check failure.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("gradient check failed: {0}")]
    CheckFailed(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Validation(_) => 1,
            AppError::Runtime(_) => 2,
            AppError::CheckFailed(_) => 3,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        AppError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        AppError::Runtime(msg.into())
    }
}

impl From<CoreError> for AppError {
    fn from(err: CoreError) -> Self {
        match err {
            CoreError::Config(_) | CoreError::Schema(_) | CoreError::Vocabulary(_) => {
                AppError::Validation(err.to_string())
            }
            CoreError::Shape(_) | CoreError::Domain(_) => AppError::Runtime(err.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(err: std::io::Error) -> Self {
        AppError::Runtime(format!("io error: {err}"))
    }
}

impl From<serde_json::Error> for AppError {
    fn from(err: serde_json::Error) -> Self {
        AppError::Runtime(format!("json error: {err}"))
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
