use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("undefined: {0}")]
    Undefined(String),
}
