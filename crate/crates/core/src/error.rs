use thiserror::Error;

use crate::config::ConfigError;
use crate::eval::EvalError;
use crate::graph::GraphError;
use crate::microdecoder::DecoderError;
use crate::pairwise::PairwiseError;
use crate::rerank::RerankError;
use crate::retrieval::RetrievalError;
use crate::scorers::ProviderError;
use crate::text_align::TextAlignError;

/// Crate-level error; every variant is tagged with the module it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("pairwise: {0}")]
    Pairwise(#[from] PairwiseError),
    #[error("text_align: {0}")]
    TextAlign(#[from] TextAlignError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("rerank: {0}")]
    Rerank(#[from] RerankError),
    #[error("scorers: {0}")]
    Provider(#[from] ProviderError),
    #[error("microdecoder: {0}")]
    Decoder(#[from] DecoderError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
