use std::path::{Path, PathBuf};

use shellnet::data::DataError;
use shellnet::network::NetworkError;
use shellnet::training::TrainError;
use thiserror::Error;

/// Process exit codes, one per error family. Usage errors from argument
/// parsing exit with 2.
pub mod exit {
    pub const CONFIG: i32 = 3;
    pub const IO: i32 = 4;
    pub const FORMAT: i32 = 5;
    pub const INVARIANT: i32 = 6;
    pub const DIVERGED: i32 = 7;
    pub const CHECK_FAILED: i32 = 8;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Data(e) => data_code(e),
            CliError::Network(e) => network_code(e),
            CliError::Train(e) => match e {
                TrainError::Config(_) => exit::CONFIG,
                TrainError::NonFinite { .. } => exit::DIVERGED,
                TrainError::Io(_) => exit::IO,
                TrainError::Data(d) => data_code(d),
                TrainError::Network(n) => network_code(n),
                TrainError::Shape(_) => exit::INVARIANT,
            },
            CliError::CheckFailed(_) => exit::CHECK_FAILED,
        }
    }
}

fn data_code(e: &DataError) -> i32 {
    match e {
        DataError::Io { .. } => exit::IO,
        _ => exit::FORMAT,
    }
}

fn network_code(e: &NetworkError) -> i32 {
    match e {
        NetworkError::Config(_) => exit::CONFIG,
        _ => exit::INVARIANT,
    }
}
