//! Error classes mapped to exit codes: config errors exit 2, contract
//! and contamination errors exit 3, numeric aborts exit 4, I/O exits 1.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Unparseable or invalid configuration (bad key, bad value, missing
    /// referenced file).
    Config(String),
    /// Domain error surfaced from the core library.
    Core(aam_core::Error),
    /// Filesystem failure outside the config's control.
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(aam_core::Error::Numeric(_)) => 4,
            CliError::Core(_) => 3,
            CliError::Io(_) => 1,
        }
    }

    /// Machine-parseable class token for the one-line error report.
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core(aam_core::Error::Numeric(_)) => "numeric",
            CliError::Core(aam_core::Error::Contamination(_)) => "contamination",
            CliError::Core(aam_core::Error::Comparability(_)) => "comparability",
            CliError::Core(_) => "contract",
            CliError::Io(_) => "io",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<aam_core::Error> for CliError {
    fn from(e: aam_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}
