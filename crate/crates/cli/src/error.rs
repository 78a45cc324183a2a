use std::fmt;

use quicktext::abtest::AbError;
use quicktext::checkpoint::CheckpointError;
use quicktext::corpus::CorpusError;
use quicktext::model::ModelError;
use quicktext::scaling::ScalingError;
use quicktext::tokenizer::TokenizerError;
use quicktext::train::TrainError;
use quicktext_serve::loadgen::LoadError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Config = 2,
    Numeric = 3,
    Io = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Config,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Numeric,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Io,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }

    pub fn context(self, what: impl fmt::Display) -> Self {
        Self {
            message: format!("{what}: {}", self.message),
            ..self
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Self::numeric(e.to_string()),
            TrainError::Config(_) | TrainError::Contract(_) => Self::config(e.to_string()),
            TrainError::Model(_) | TrainError::Nn(_) => Self::numeric(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Contract(m) => Self::config(m),
            other => Self::io(other.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::Contract(m) => Self::config(m),
            other => Self::io(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::io(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<ScalingError> for CliError {
    fn from(e: ScalingError) -> Self {
        match e {
            ScalingError::Contract(m) => Self::numeric(m),
            other => Self::io(other.to_string()),
        }
    }
}

impl From<AbError> for CliError {
    fn from(e: AbError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Contract(m) => Self::config(m),
            other => Self::io(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
