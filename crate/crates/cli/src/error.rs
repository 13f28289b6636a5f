use regerr_core::dataset::DatasetError;
use regerr_core::{FfdError, VolumeError};
use regerr_net::NetError;
use thiserror::Error;

/// Failure of a command, carrying its exit code class.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Check(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

fn is_config(e: &DatasetError) -> bool {
    match e {
        DatasetError::InvalidOption(_) | DatasetError::TooFewPatients(_) => true,
        DatasetError::Ffd(FfdError::InvalidSpec(_)) => true,
        DatasetError::Case { source, .. } => is_config(source),
        _ => false,
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        if is_config(&e) {
            CliError::Config(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Config(_) | NetError::TrainConfig(_) | NetError::VersionMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            NetError::NonFiniteLoss { .. } => CliError::Check(e.to_string()),
            NetError::Dataset(d) => d.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FfdError> for CliError {
    fn from(e: FfdError) -> Self {
        match e {
            FfdError::InvalidSpec(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<regerr_core::landmarks::LandmarkError> for CliError {
    fn from(e: regerr_core::landmarks::LandmarkError) -> Self {
        CliError::Data(e.to_string())
    }
}
