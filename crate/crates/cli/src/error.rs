use std::path::Path;

use popparts_core::Error as CoreError;

/// Command failure, classified by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad command line: unknown flag, malformed value, missing argument.
    #[error("usage: {0}")]
    Usage(String),
    /// Missing, unreadable or malformed input.
    #[error("{0}")]
    Data(String),
    /// A configuration value or a checked property is out of bounds.
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }

    /// Wraps a core error raised while handling `path`.
    pub fn in_file(path: &Path, e: CoreError) -> Self {
        match CliError::from(e) {
            CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
            other => other,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidConfig(_)
            | CoreError::InvalidScale(_)
            | CoreError::DegenerateCrop(_)
            | CoreError::TooManyBodies { .. } => CliError::Invariant(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::from(CoreError::EmptyPose).exit_code(), 2);
        assert_eq!(CliError::from(CoreError::InvalidScale(-1.0)).exit_code(), 3);
    }

    #[test]
    fn data_errors_name_the_file() {
        let e = CliError::in_file(Path::new("a.pgm"), CoreError::DimensionMismatch("3x3".into()));
        assert_eq!(e.to_string(), "a.pgm: dimension mismatch: 3x3");
    }
}
