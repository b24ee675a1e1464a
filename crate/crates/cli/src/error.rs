use std::fmt;

/// Failure of a subcommand, sorted by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    /// Prefixes the message with the pipeline stage that failed.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("stage {stage}: {m}")),
            CliError::Data(m) => CliError::Data(format!("stage {stage}: {m}")),
            CliError::Internal(m) => CliError::Internal(format!("stage {stage}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<maskprop::Error> for CliError {
    fn from(e: maskprop::Error) -> Self {
        use maskprop::Error as E;
        let msg = e.to_string();
        match &e {
            E::Io(io) if matches!(io.kind(), std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied) => {
                CliError::Data(msg)
            }
            E::UnknownSession(_) | E::SessionExists(_) | E::UnknownToken(_) | E::DuplicateAnswer(_) => {
                CliError::Data(msg)
            }
            _ if e.is_data_error() => CliError::Data(msg),
            _ => CliError::Internal(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        maskprop::Error::Io(e).into()
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::Data(format!("bad config: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
