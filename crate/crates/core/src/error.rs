use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("layer {layer}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor shape {shape:?} holds {expected} values, got {got}")]
    BadTensor {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("layer has no weights")]
    NoWeights,
    #[error("{0}")]
    Unsupported(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Process exit code buckets used by the experiment runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Unsupported(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) => 2,
            Error::NonFinite(_) => 3,
            _ => 1,
        }
    }
}
