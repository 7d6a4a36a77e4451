use std::io;
use std::path::PathBuf;

use gudrl_core::agent::AgentError;
use gudrl_core::policy::PolicyError;
use gudrl_core::replay::ReplayError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("setting `{0}` trains on a fixed dataset; pass --dataset <FILE>")]
    MissingDataset(String),
    #[error("dataset file {0} does not exist")]
    DatasetNotFound(PathBuf),
    #[error("cannot write to {path}: {source}")]
    Unwritable { path: PathBuf, source: io::Error },
    #[error("unknown setting `{0}` (expected online, il, offline, gcrl or meta)")]
    UnknownSetting(String),
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: PolicyError },
    #[error("dataset {path}: {source}")]
    Dataset { path: PathBuf, source: ReplayError },
    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("{0}")]
    NotEnoughData(String),
    #[error("{path}:{line}: {reason}")]
    MalformedCsv { path: PathBuf, line: u64, reason: String },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("seeds failed: {0}")]
    SeedsFailed(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::MissingDataset(_) | CliError::DatasetNotFound(_) => 3,
            CliError::Unwritable { .. } => 4,
            CliError::UnknownSetting(_) => 5,
            CliError::Checkpoint { .. } | CliError::Dataset { .. } => 6,
            CliError::NotEnoughData(_) => 7,
            CliError::MalformedCsv { .. } => 8,
            CliError::Agent(_) | CliError::SeedsFailed(_) => 1,
        }
    }
}

pub(crate) fn unwritable(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Unwritable { path, source }
}
