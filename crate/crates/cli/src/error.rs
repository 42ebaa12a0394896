use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] salattn::Error),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("config: {0}")]
    ConfigValue(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{} exists and is not empty; pass --force to overwrite", path.display())]
    Exists { path: PathBuf },

    #[error("unmatched frames: {0}")]
    Unmatched(String),

    #[error("benchmark aborted: {0}")]
    Bench(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Config { .. } | CliError::ConfigValue(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Exists { .. } => "exists",
            CliError::Unmatched(_) => "unmatched",
            CliError::Bench(_) => "bench",
            CliError::GradCheck(_) => "gradcheck",
        }
    }

    /// Single-line report: `error[category]: message`.
    pub fn report(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        format!("error[{}]: {msg}", self.category())
    }
}
