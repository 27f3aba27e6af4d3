use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// Offline target construction made the trigger loss worse.
    #[error("phase I failure: trigger loss rose from {initial:.6e} to {last:.6e}")]
    PhaseOne { initial: f64, last: f64 },

    #[error(transparent)]
    ConfigFile(#[from] ConfigError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt run log {path}: {reason}")]
    CorruptLog { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path} not found")]
    MissingFile { path: PathBuf },

    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: bad magic bytes, not a GAPL checkpoint")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported checkpoint version {found}")]
    Version { path: PathBuf, found: u16 },

    #[error("{path}: truncated checkpoint")]
    Truncated { path: PathBuf },

    #[error("{path}: inconsistent dimensions: {reason}")]
    Dimension { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
