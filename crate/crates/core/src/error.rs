use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input lies outside the domain where the operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// A structural invariant of an input record does not hold.
    #[error("validation error: {0}")]
    Validation(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("numeric error: {0}")]
    NonFinite(String),

    /// A cache or saved state does not match the call it is used with.
    #[error("state error: {0}")]
    State(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("decode error: {0}")]
    Decode(String),
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
