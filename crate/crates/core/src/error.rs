use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty pose: no labeled parts")]
    EmptyPose,

    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),

    #[error("invalid scale factor {0}: must be positive")]
    InvalidScale(f64),

    #[error("shape mismatch in map `{name}`: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate crop: {0}")]
    DegenerateCrop(String),

    #[error("too many bodies: {count} exceeds cap {cap}")]
    TooManyBodies { count: usize, cap: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Malformed binary or text input, with the byte offset where parsing failed.
    #[error("{format} parse error at byte {offset}: {message}")]
    Format {
        format: &'static str,
        offset: usize,
        message: String,
    },

    #[error("json error at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

impl Error {
    pub(crate) fn format(format: &'static str, offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            format,
            offset,
            message: message.into(),
        }
    }
}
