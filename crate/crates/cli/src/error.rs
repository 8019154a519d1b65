use std::path::PathBuf;

use ar2_core::cam::CamError;
use ar2_core::checkpoint::CheckpointError;
use ar2_core::config::ConfigError;
use ar2_core::corrupt::CorruptionError;
use ar2_core::data::DataError;
use ar2_core::imageio::ImageIoError;
use ar2_core::metrics::MetricsError;
use ar2_core::model::ModelError;
use ar2_core::repair::RepairError;
use ar2_core::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Repair(#[from] RepairError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cam(#[from] CamError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Process exit codes, one per failure family.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const DATA: u8 = 4;
    pub const CHECKPOINT: u8 = 5;
    pub const DIVERGED: u8 = 6;
    pub const METRIC: u8 = 7;
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Config(_)
            | CliError::Train(TrainError::Config(_))
            | CliError::Repair(RepairError::Config(_)) => exit::CONFIG,
            CliError::Train(TrainError::NonFinite { .. }) | CliError::Repair(RepairError::NonFinite { .. }) => {
                exit::DIVERGED
            }
            CliError::Data(_) | CliError::Io { .. } | CliError::Image(_) | CliError::Corruption(_) => exit::DATA,
            CliError::Checkpoint(_) => exit::CHECKPOINT,
            CliError::Metrics(MetricsError::UndefinedCe { .. } | MetricsError::IncompleteMce(_) | MetricsError::DuplicateCe(_) | MetricsError::MissingModel(_)) => {
                exit::METRIC
            }
            CliError::Metrics(MetricsError::Io { .. }) => exit::DATA,
            _ => exit::OTHER,
        }
    }
}
