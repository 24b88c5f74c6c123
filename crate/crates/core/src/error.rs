use thiserror::Error;

use crate::clustering::ClusterError;
use crate::data::DataError;
use crate::federation::FederationError;
use crate::metrics::MetricsError;
use crate::neural::NeuralError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }

    /// True when the failure is a numerical breakdown during training
    /// rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Neural(e) => e.is_numerical(),
            Error::Federation(e) => e.is_numerical(),
            _ => false,
        }
    }
}
