use std::path::PathBuf;

use aisdet::detector::DetectorError;
use aisdet::fpr::FprError;
use aisdet::nnet::NnetError;
use aisdet::phantom::PhantomError;
use aisdet::readerstudy::ReaderError;
use aisdet::volume::VolumeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Failed(_) => 1,
            Self::Config(_) => 2,
            Self::Io(_) => 3,
            Self::MissingArtifact(_) => 4,
            Self::PortInUse(_) => 5,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Self::Io(e.to_string())
        } else {
            Self::Config(e.to_string())
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::Io(e) => e.into(),
            VolumeError::BadWindow(_) => Self::Config(e.to_string()),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::Io(e) => e.into(),
            PhantomError::Volume(e) => e.into(),
            PhantomError::InvalidConfig(m) => Self::Config(m),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<NnetError> for CliError {
    fn from(e: NnetError) -> Self {
        match e {
            NnetError::Io(e) => e.into(),
            NnetError::InvalidSchedule(m) => Self::Config(m),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<DetectorError> for CliError {
    fn from(e: DetectorError) -> Self {
        match e {
            DetectorError::Nnet(e) => e.into(),
            DetectorError::InvalidConfig(m) => Self::Config(m),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<FprError> for CliError {
    fn from(e: FprError) -> Self {
        match e {
            FprError::Io(e) => e.into(),
            FprError::Nnet(e) => e.into(),
            FprError::Detector(e) => e.into(),
            FprError::Volume(e) => e.into(),
            FprError::InvalidConfig(m) => Self::Config(m),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<ReaderError> for CliError {
    fn from(e: ReaderError) -> Self {
        match e {
            ReaderError::Io(e) => e.into(),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<aisdet::eval::EvalError> for CliError {
    fn from(e: aisdet::eval::EvalError) -> Self {
        Self::Failed(e.to_string())
    }
}

impl From<aisdet::experiment::ExperimentError> for CliError {
    fn from(e: aisdet::experiment::ExperimentError) -> Self {
        match e {
            aisdet::experiment::ExperimentError::InvalidConfig(m) => Self::Config(m),
            aisdet::experiment::ExperimentError::Phantom(e) => e.into(),
            aisdet::experiment::ExperimentError::Detector(e) => e.into(),
            aisdet::experiment::ExperimentError::Fpr(e) => e.into(),
            aisdet::experiment::ExperimentError::Eval(e) => e.into(),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
