//! Logit providers for the rerank stage.
//!
//! A provider returns the logits of the `Yes` and `No` answer tokens at the
//! position after `Answer:`. [`HeuristicProvider`] scores pairs with a
//! trained combiner and needs no model; [`remote::RemoteClient`] talks to
//! an external completion service.

pub mod remote;
pub mod stub;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{NodeId, TextAttributedGraph};
use crate::pairwise::{score, CombinerParams, PairFeaturizer, PairwiseError, StructureConfig};
use crate::ppr::PprCache;
use crate::rerank::PromptParts;

pub use remote::{RemoteClient, RemoteConfig, RemoteGenerator};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("capability: {0}")]
    Capability(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: Box<ProviderError>,
    },
    #[error("configuration: {0}")]
    Config(String),
}

impl ProviderError {
    /// Transport faults and 408/429/5xx responses are worth retrying.
    pub fn is_retriable(&self) -> bool {
        match self {
            ProviderError::Transport(_) => true,
            ProviderError::Status { status, .. } => {
                *status == 408 || *status == 429 || *status >= 500
            }
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_embedding_injection: bool,
    pub supports_grouped_decoding: bool,
    pub supports_prefix_reuse: bool,
    /// Identical inputs give identical logits.
    pub deterministic: bool,
    /// `Yes`/`No` logits are those of the first subtoken of each word.
    pub first_subtoken: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YesNoLogits {
    pub yes: f64,
    pub no: f64,
}

impl YesNoLogits {
    /// Non-finite logits never reach a ranking.
    pub fn checked(self) -> Result<Self, ProviderError> {
        if self.yes.is_finite() && self.no.is_finite() {
            Ok(self)
        } else {
            Err(ProviderError::Capability(format!(
                "backend returned non-finite logits (yes={}, no={})",
                self.yes, self.no
            )))
        }
    }
}

pub struct ScoreRequest<'a> {
    pub source: NodeId,
    pub candidate: NodeId,
    pub prompt: &'a PromptParts,
}

/// Backend producing Yes/No logits. Implementations must be safe to call
/// from several threads at once.
pub trait LogitProvider: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Submit the prefix shared by the coming candidate prompts, for
    /// backends that cache it. Called once per `(source, examples)` pair.
    fn prepare_prefix(&self, _shared_prefix: &str) -> Result<(), ProviderError> {
        Ok(())
    }

    fn logits(&self, request: &ScoreRequest<'_>) -> Result<YesNoLogits, ProviderError>;
}

impl<T: LogitProvider + ?Sized> LogitProvider for Arc<T> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }

    fn prepare_prefix(&self, shared_prefix: &str) -> Result<(), ProviderError> {
        (**self).prepare_prefix(shared_prefix)
    }

    fn logits(&self, request: &ScoreRequest<'_>) -> Result<YesNoLogits, ProviderError> {
        (**self).logits(request)
    }
}

/// Offline provider: `yes` is the combiner's pre-activation score of the
/// pair and `no` is zero, so the Yes/No index is the sigmoid of that score.
pub struct HeuristicProvider {
    graph: Arc<TextAttributedGraph>,
    cache: PprCache,
    structure: StructureConfig,
    params: CombinerParams,
}

impl HeuristicProvider {
    /// `graph` is the observed graph the scores are computed on.
    pub fn new(
        graph: Arc<TextAttributedGraph>,
        structure: StructureConfig,
        params: CombinerParams,
    ) -> Result<Self, PairwiseError> {
        params.check()?;
        if params.shape != structure.shape() {
            return Err(PairwiseError::Shape(format!(
                "params {:?} do not match configured shape {:?}",
                params.shape,
                structure.shape()
            )));
        }
        Ok(HeuristicProvider {
            graph,
            cache: PprCache::new(structure.ppr),
            structure,
            params,
        })
    }

    pub fn graph(&self) -> &Arc<TextAttributedGraph> {
        &self.graph
    }

    pub fn heuristic_logits(&self, source: NodeId, candidate: NodeId) -> YesNoLogits {
        let featurizer = PairFeaturizer::new(&self.graph, &self.cache, self.structure);
        let ctx = featurizer.context(source, candidate);
        YesNoLogits {
            yes: score(&ctx, &self.params),
            no: 0.0,
        }
    }
}

impl LogitProvider for HeuristicProvider {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            deterministic: true,
            ..Capabilities::default()
        }
    }

    fn logits(&self, request: &ScoreRequest<'_>) -> Result<YesNoLogits, ProviderError> {
        self.heuristic_logits(request.source, request.candidate).checked()
    }
}
