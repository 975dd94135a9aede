use std::io;

use thiserror::Error;

/// Error type shared by every module of the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::LabError::Shape(format!($($arg)*)) };
}
macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::LabError::Input(format!($($arg)*)) };
}
pub(crate) use input_err;
pub(crate) use shape_err;
