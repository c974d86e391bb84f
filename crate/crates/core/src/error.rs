use thiserror::Error;

use crate::road_network::RoadError;
use crate::traffic_sim::SimError;

/// A configuration value that cannot be used; `key` is the dotted config path.
#[derive(Clone, Debug, Error, PartialEq)]
#[error("invalid `{key}`: {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Road(#[from] RoadError),

    #[error(transparent)]
    Sim(#[from] SimError),

    #[error(transparent)]
    Nn(#[from] hcmvp_nn::NnError),

    #[error("non-finite {what} at episode {episode}, step {step}")]
    NonFinite {
        what: String,
        episode: usize,
        step: usize,
    },

    #[error("{0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
