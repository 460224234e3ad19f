//! Candidate-set sampling, ranking metrics and end-to-end experiments.

use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Edge, EdgeSplit, NodeId, TextAttributedGraph};
use crate::par::{self, Execution};
use crate::rerank::{rerank_candidates, select_icl_examples, Rank, RankedList, RerankConfig};
use crate::retrieval::{
    generate_queries, retrieve_candidates, Bm25Index, CandidateSet, Provenance, QueryGenerator,
    QueryRequest, RetrievalConfig,
};
use crate::scorers::LogitProvider;
use crate::seeded_rng;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error("no ranked lists to aggregate")]
    Empty,
    #[error("split has no test edges")]
    NoTestEdges,
    #[error("({node}, {positive}) is not an edge of the graph")]
    NotAnEdge { node: NodeId, positive: NodeId },
    #[error("graph has {nodes} nodes; {wanted} candidates need more")]
    GraphTooSmall { nodes: usize, wanted: usize },
    #[error("node {node} has {available} eligible negatives, {wanted} needed")]
    NotEnoughNegatives {
        node: NodeId,
        wanted: usize,
        available: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    /// Candidates per pair: one positive plus `candidates - 1` negatives.
    pub candidates: usize,
    /// Candidates kept by retrieval; 0 skips the retrieval stage.
    pub retrieved: usize,
    pub num_pairs: usize,
    pub seed: u64,
    pub k: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            candidates: 150,
            retrieved: 0,
            num_pairs: 200,
            seed: 0,
            k: 10,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.candidates < 2 {
            return Err(EvalError::Protocol(format!(
                "eval.candidates must be at least 2, got {}",
                self.candidates
            )));
        }
        if self.retrieved > self.candidates {
            return Err(EvalError::Protocol(format!(
                "eval.retrieved ({}) exceeds eval.candidates ({})",
                self.retrieved, self.candidates
            )));
        }
        if self.num_pairs == 0 {
            return Err(EvalError::Protocol("eval.num_pairs must be positive".into()));
        }
        if self.k == 0 {
            return Err(EvalError::Protocol("eval.k must be positive".into()));
        }
        Ok(())
    }
}

const CANDIDATE_STREAM: u64 = 0xca << 48;
const PAIR_STREAM: u64 = 0xba << 48;

/// The positive plus `n_total - 1` distinct negatives drawn uniformly from
/// nodes that are neither `source` nor any neighbor of it in `graph`.
/// `graph` should hold every known edge so that no true link is sampled as
/// a negative. Candidates are returned in ascending id order.
pub fn sample_candidate_set(
    graph: &TextAttributedGraph,
    source: NodeId,
    positive: NodeId,
    n_total: usize,
    seed: u64,
) -> Result<CandidateSet, EvalError> {
    let n = graph.node_count();
    if n_total == 0 || n <= n_total {
        return Err(EvalError::GraphTooSmall {
            nodes: n,
            wanted: n_total,
        });
    }
    if !graph.has_edge(source, positive) {
        return Err(EvalError::NotAnEdge {
            node: source,
            positive,
        });
    }
    let eligible: Vec<NodeId> = (0..n)
        .filter(|&v| v != source && !graph.has_edge(source, v))
        .collect();
    let wanted = n_total - 1;
    if eligible.len() < wanted {
        return Err(EvalError::NotEnoughNegatives {
            node: source,
            wanted,
            available: eligible.len(),
        });
    }
    let mut rng = seeded_rng(seed, CANDIDATE_STREAM);
    let mut candidates: Vec<NodeId> = index::sample(&mut rng, eligible.len(), wanted)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    candidates.push(positive);
    candidates.sort_unstable();
    Ok(CandidateSet {
        source,
        provenance: vec![Provenance::Sampled; candidates.len()],
        candidates,
        positive,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_k: f64,
    pub k: usize,
}

/// MRR and Hits@1/Hits@k; infinite ranks contribute 0 to both.
pub fn compute_metrics(ranks: &[Rank], k: usize) -> Result<Metrics, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = ranks.len() as f64;
    let frac = |cut: usize| ranks.iter().filter(|r| r.within(cut)).count() as f64 / n;
    Ok(Metrics {
        mrr: ranks.iter().map(|r| r.reciprocal()).sum::<f64>() / n,
        hits_at_1: frac(1),
        hits_at_k: frac(k),
        k,
    })
}

pub fn metrics_of(lists: &[RankedList], k: usize) -> Result<Metrics, EvalError> {
    let ranks: Vec<Rank> = lists.iter().map(|l| l.rank_of_positive).collect();
    compute_metrics(&ranks, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: usize,
    pub source: NodeId,
    pub positive: NodeId,
    pub rank: Rank,
    pub positive_retained: bool,
    /// Candidates handed to the reranker.
    pub reranked: usize,
    pub provider_calls: usize,
    pub provider_errors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_secs: f64,
    /// Wall time of each pair, by pair id.
    pub per_pair_secs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub protocol: EvalProtocol,
    pub metrics: Metrics,
    pub pairs: Vec<PairRecord>,
    pub provider_calls: usize,
    pub provider_errors: usize,
    /// The only nondeterministic part of a report.
    pub timing: Timing,
}

impl EvalReport {
    /// Report JSON with the `timing` key removed.
    pub fn deterministic_json(&self) -> serde_json::Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("timing");
        }
        serde_json::to_string(&value)
    }
}

/// Everything the experiment needs besides the protocol.
pub struct Pipeline<'a> {
    /// Graph of observed (training) edges; retrieval, in-context examples
    /// and the provider only see this.
    pub observed: &'a TextAttributedGraph,
    pub index: &'a Bm25Index,
    pub generator: &'a dyn QueryGenerator,
    pub provider: &'a dyn LogitProvider,
    pub retrieval: RetrievalConfig,
    pub rerank: RerankConfig,
}

/// `min(num_pairs, |test|)` test edges sampled uniformly without
/// replacement, each with a random orientation and a per-pair seed.
pub fn sample_pairs(split: &EdgeSplit, num_pairs: usize, seed: u64) -> Vec<(NodeId, NodeId, u64)> {
    let mut test = split.test.clone();
    test.sort_unstable();
    let mut rng = seeded_rng(seed, PAIR_STREAM);
    let take = num_pairs.min(test.len());
    index::sample(&mut rng, test.len(), take)
        .into_iter()
        .map(|i| {
            let Edge(u, v) = test[i];
            let (s, t) = if rng.random::<bool>() { (u, v) } else { (v, u) };
            (s, t, rng.random::<u64>())
        })
        .collect()
}

struct PairOutcome {
    record: PairRecord,
    secs: f64,
}

fn run_pair(
    full: &TextAttributedGraph,
    protocol: &EvalProtocol,
    pipeline: &Pipeline<'_>,
    pair_id: usize,
    (source, positive, seed): (NodeId, NodeId, u64),
) -> crate::Result<PairOutcome> {
    let start = Instant::now();
    let sampled = sample_candidate_set(full, source, positive, protocol.candidates, seed)?;
    let candidates = if protocol.retrieved > 0 {
        let request = QueryRequest {
            graph: pipeline.observed,
            source,
            n_groups: pipeline.retrieval.n_groups,
            group_size: pipeline.retrieval.group_size,
            seed,
        };
        let queries = generate_queries(pipeline.generator, &request)?;
        retrieve_candidates(
            pipeline.observed,
            pipeline.index,
            source,
            &queries,
            &sampled,
            protocol.retrieved,
            pipeline.retrieval.beta,
            Execution::Sequential,
        )?
    } else {
        sampled
    };
    let examples = select_icl_examples(pipeline.observed, source, pipeline.rerank.icl_k, seed)?;
    let ranked = rerank_candidates(
        pipeline.provider,
        pipeline.observed,
        &candidates,
        &examples,
        &pipeline.rerank,
        Execution::Sequential,
    )?;
    let secs = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok(PairOutcome {
        record: PairRecord {
            pair_id,
            source,
            positive,
            rank: ranked.rank_of_positive,
            positive_retained: candidates.contains_positive(),
            reranked: candidates.len(),
            provider_calls: ranked.provider_calls,
            provider_errors: ranked.failures.len(),
        },
        secs,
    })
}

/// Sample pairs from the test edges, build a candidate set for each,
/// optionally narrow it by retrieval, rerank, and aggregate.
///
/// `full` holds all known edges and is used only to exclude true
/// neighbors from the sampled negatives.
pub fn run_experiment(
    full: &TextAttributedGraph,
    split: &EdgeSplit,
    protocol: &EvalProtocol,
    pipeline: &Pipeline<'_>,
    exec: Execution,
) -> crate::Result<EvalReport> {
    protocol.validate()?;
    if split.test.is_empty() {
        return Err(EvalError::NoTestEdges.into());
    }
    let start = Instant::now();
    let pairs = sample_pairs(split, protocol.num_pairs, protocol.seed);
    if pairs.len() < protocol.num_pairs {
        log::warn!(
            "only {} test edges available for {} requested pairs",
            pairs.len(),
            protocol.num_pairs
        );
    }
    let outcomes = par::map_range(exec, pairs.len(), |i| {
        run_pair(full, protocol, pipeline, i, pairs[i])
    });
    let mut records = Vec::with_capacity(outcomes.len());
    let mut per_pair_secs = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        let outcome = outcome?;
        records.push(outcome.record);
        per_pair_secs.push(outcome.secs);
    }
    let ranks: Vec<Rank> = records.iter().map(|r| r.rank).collect();
    let metrics = compute_metrics(&ranks, protocol.k)?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        protocol: *protocol,
        metrics,
        provider_calls: records.iter().map(|r| r.provider_calls).sum(),
        provider_errors: records.iter().map(|r| r.provider_errors).sum(),
        pairs: records,
        timing: Timing {
            total_secs: start.elapsed().as_secs_f64(),
            per_pair_secs,
        },
    })
}

/// Expected MRR of a uniformly random ranking of `n` candidates, `H_n / n`.
pub fn random_baseline_mrr(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum::<f64>() / n as f64
}
