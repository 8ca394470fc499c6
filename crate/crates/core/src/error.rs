use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::data::DataError;
use crate::optim::OptimError;
use crate::propagation::PropagationError;
use crate::prototypes::PrototypeError;
use crate::objectives::ObjectiveError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run directory {0} is locked by another trainer")]
    Locked(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Locked(_) => ErrorClass::Config,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io { .. } => ErrorClass::Data,
            Error::Propagation(PropagationError::DimensionMismatch { .. }) => ErrorClass::Config,
            Error::Propagation(_)
            | Error::Prototype(_)
            | Error::Objective(_)
            | Error::Optim(_) => ErrorClass::Numerical,
        }
    }
}
