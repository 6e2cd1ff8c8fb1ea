use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("architecture needs {flops} flops, budget is {budget}")]
    OverBudget { flops: u64, budget: u64 },
    #[error("parameter is frozen: {0}")]
    Frozen(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::Argument(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
pub(crate) use {arg_err, config_err, shape_err};
