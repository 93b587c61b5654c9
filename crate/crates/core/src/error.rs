use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::embedstore::EmbedError;
use crate::fusionnet::FusionError;
use crate::metrics::MetricsError;
use crate::protocol::ProtocolError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid synthetic corpus spec: {0}")]
    SpecInvalid(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
