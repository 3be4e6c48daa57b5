use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("kernel size must be odd and >= 1, got {0}")]
    EvenKernel(usize),

    #[error("window size {window} does not divide feature map {height}x{width}")]
    IndivisibleWindow { window: usize, height: usize, width: usize },

    #[error("{heads} heads do not divide {channels} channels")]
    HeadsChannels { heads: usize, channels: usize },

    #[error("NaN encountered in {0}")]
    NaN(String),

    #[error("filter axis of length 1 cannot be normalized")]
    DegenerateFilterAxis,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("non-finite value {value} at step {step}")]
    Diverged { step: usize, value: f64 },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
