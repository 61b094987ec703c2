use std::fmt;

use capsprom_core::checkpoint::CheckpointError;
use capsprom_core::data::DataError;
use capsprom_core::model::ModelError;
use capsprom_core::train::{ConfigError, TrainError};

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Runtime = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError {
            kind: ExitKind::Usage,
            msg: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError {
            kind: ExitKind::Data,
            msg: msg.into(),
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError {
            kind: ExitKind::Runtime,
            msg: msg.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::usage(format!("invalid config: {e}"))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::UnknownDataset { .. } => CliError::usage(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(_) => CliError::runtime(e.to_string()),
            _ => CliError::data(format!("checkpoint: {e}")),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::LengthMismatch { .. } => CliError::data(e.to_string()),
            ModelError::Config(_) | ModelError::InvalidLayer { .. } => CliError::usage(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        let mut root = &e;
        while let TrainError::Fold { source, .. } = root {
            root = source;
        }
        let kind = match root {
            TrainError::Config(_) => ExitKind::Usage,
            TrainError::Data(DataError::UnknownDataset { .. }) => ExitKind::Usage,
            TrainError::Data(_) | TrainError::Checkpoint(_) => ExitKind::Data,
            TrainError::Model(ModelError::LengthMismatch { .. }) => ExitKind::Data,
            _ => ExitKind::Runtime,
        };
        let msg = match kind {
            ExitKind::Usage if matches!(root, TrainError::Config(_)) => format!("invalid config: {msg}"),
            _ => msg,
        };
        CliError { kind, msg }
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}
