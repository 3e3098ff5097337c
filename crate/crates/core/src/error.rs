use alloc::string::String;

/// Failure modes shared by every module of the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid sparsity pattern: {0}")]
    Pattern(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("non-finite loss {loss} at iteration {iter}")]
    NonFinite { iter: usize, loss: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
