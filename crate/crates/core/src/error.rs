use thiserror::Error;

use crate::annindex::IndexError;
use crate::bundle::BundleError;
use crate::compression::CompressionError;
use crate::descfile::FormatError;
use crate::embedding::EmbedError;
use crate::hmmfilter::FilterError;
use crate::mapgraph::GraphError;
use crate::simulator::SimError;

pub type Result<T> = std::result::Result<T, Error>;

/// Umbrella error for the engine-level entry points.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
