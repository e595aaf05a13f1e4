//! JSON config loading and the error type that carries exit codes.

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use xmodal_core::Error;

#[derive(Debug)]
pub enum CliError {
    /// Bad config file, flag value or parameter: exit 2.
    Config(String),
    Io(String),
    Core(Error),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) | CliError::Other(_) => 1,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::GridTooSmall(_) => 2,
                Error::Diverged { .. } | Error::NonFiniteGradient { .. } => 3,
                Error::DimMismatch { .. } | Error::Shape(_) | Error::PositionalDim(_) => 4,
                _ => 1,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) | CliError::Other(m) => f.write_str(m),
            CliError::Core(e) => match e {
                Error::Config(m) => write!(f, "config error: {m}"),
                e => write!(f, "{e}"),
            },
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

/// Parses a JSON config; errors name the offending field path.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let field = if field == "." { "(root)".to_string() } else { field };
        CliError::Config(format!("{}: field `{field}`: {}", path.display(), e.inner()))
    })
}
