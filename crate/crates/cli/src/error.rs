use std::fmt;

use gprg_core::GprgError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}", ConfigMessage { key: key.as_deref(), line: *line, message })]
    Config {
        key: Option<String>,
        line: Option<usize>,
        message: String,
    },
    /// Unreadable or mismatched input files.
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Solver(String),
}

struct ConfigMessage<'a> {
    key: Option<&'a str>,
    line: Option<usize>,
    message: &'a str,
}

impl fmt::Display for ConfigMessage<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("config error")?;
        if let Some(l) = self.line {
            write!(f, " at line {l}")?;
        }
        if let Some(k) = self.key {
            write!(f, " in `{k}`")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Input(_) => 1,
            Self::Solver(_) => 2,
        }
    }

    /// Classifies a core error raised while loading inputs or running.
    pub fn from_core(e: GprgError) -> Self {
        match e {
            GprgError::Config(m) => Self::Config {
                key: None,
                line: None,
                message: m,
            },
            GprgError::GridMismatch(_) | GprgError::Format(_) => Self::Input(e.to_string()),
            other => Self::Solver(other.to_string()),
        }
    }
}
