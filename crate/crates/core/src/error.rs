use thiserror::Error;

use crate::data::DataError;
use crate::tensor::TensorError;
use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("non-finite loss at inner step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid learner configuration: {0}")]
    InvalidLearner(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("gumbel-softmax: {0}")]
    Gumbel(String),
    #[error("parameter schema mismatch at `{0}`")]
    SchemaMismatch(String),
    #[error("mask index {index} out of range for {n} choices")]
    MaskIndex { index: usize, n: usize },
    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("federation: {0}")]
    Federation(String),
    #[error("config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
