//! Rerank stage: in-context example selection, prompt assembly, Yes/No
//! index scoring and the final ranking of a candidate set.

pub mod templates;

use std::sync::Arc;

use fnv::FnvHashSet;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{NodeId, TextAttributedGraph};
use crate::par::{self, Execution};
use crate::retrieval::CandidateSet;
use crate::scorers::{LogitProvider, ProviderError, ScoreRequest};
use crate::seeded_rng;
use templates::*;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("graph has {nodes} nodes; {k} positive and {k} negative examples need at least {}", 2 * k + 1)]
    GraphTooSmall { nodes: usize, k: usize },
    #[error("not enough non-neighbors of node {node} for {wanted} negative examples")]
    NotEnoughNegatives { node: NodeId, wanted: usize },
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("shared prefix differs for candidate {candidate}")]
    PrefixMismatch { candidate: NodeId },
    #[error("provider failed on candidate {candidate}: {source}")]
    Provider {
        candidate: NodeId,
        #[source]
        source: ProviderError,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankConfig {
    /// Positive (and negative) in-context examples per prompt.
    pub icl_k: usize,
    /// Abort on the first provider failure instead of ranking the failed
    /// candidate last.
    pub strict: bool,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            icl_k: 2,
            strict: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExample {
    pub node: NodeId,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExamples {
    pub positives: Vec<IclExample>,
    pub negatives: Vec<IclExample>,
    pub seed: u64,
    /// Fewer than the requested examples were available.
    pub truncated: bool,
}

impl IclExamples {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }
}

const ICL_STREAM: u64 = 0x1c1 << 40;

/// Up to `k` observed neighbors of `source` as positives and as many
/// uniform non-neighbors as negatives. `graph` is the observed graph.
pub fn select_icl_examples(
    graph: &TextAttributedGraph,
    source: NodeId,
    k: usize,
    seed: u64,
) -> Result<IclExamples, RerankError> {
    if k == 0 {
        return Ok(IclExamples {
            seed,
            ..IclExamples::default()
        });
    }
    let n = graph.node_count();
    if n < 2 * k + 1 {
        return Err(RerankError::GraphTooSmall { nodes: n, k });
    }
    let neighbors = graph.neighbors(source);
    let take = k.min(neighbors.len());
    let mut rng = seeded_rng(seed, ICL_STREAM ^ source as u64);
    let mut picked: Vec<NodeId> = index::sample(&mut rng, neighbors.len(), take)
        .into_iter()
        .map(|i| neighbors[i])
        .collect();
    picked.sort_unstable();

    let available = n - 1 - neighbors.len();
    if available < take {
        return Err(RerankError::NotEnoughNegatives {
            node: source,
            wanted: take,
        });
    }
    let mut negatives = Vec::with_capacity(take);
    let mut chosen = FnvHashSet::default();
    while negatives.len() < take {
        let v = rng.random_range(0..n);
        if v != source && !graph.has_edge(source, v) && chosen.insert(v) {
            negatives.push(v);
        }
    }
    negatives.sort_unstable();
    let example = |node: NodeId| IclExample {
        node,
        text: graph.text(node).to_string(),
    };
    Ok(IclExamples {
        positives: picked.into_iter().map(example).collect(),
        negatives: negatives.into_iter().map(example).collect(),
        seed,
        truncated: take < k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    LinkPrediction,
    NeighborPrediction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkerKind {
    Node,
    Pairwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Prefix,
    Suffix,
}

/// Location of a `<NODE>` or `<PAIRWISE>` marker. `node` is the node the
/// marker stands for; for pairwise markers the pair is `(source, node)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placeholder {
    pub kind: MarkerKind,
    pub segment: Segment,
    pub offset: usize,
    pub node: NodeId,
}

/// A prompt split at the boundary shared by every candidate of one
/// `(source, examples)` pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptParts {
    pub shared_prefix: Arc<str>,
    pub candidate_suffix: String,
    pub placeholders: Vec<Placeholder>,
}

impl PromptParts {
    pub fn full_text(&self) -> String {
        let mut s = String::with_capacity(self.shared_prefix.len() + self.candidate_suffix.len());
        s.push_str(&self.shared_prefix);
        s.push_str(&self.candidate_suffix);
        s
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PromptNode<'a> {
    pub id: NodeId,
    pub text: &'a str,
}

pub fn sanitize_text(text: &str) -> String {
    let joined = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if joined.is_empty() {
        EMPTY_TEXT.to_string()
    } else {
        joined
    }
}

/// Append `template` with its text slot filled, recording marker offsets
/// relative to the start of `out`.
fn render_into(
    out: &mut String,
    template: &str,
    text: &str,
    node: NodeId,
    segment: Segment,
    placeholders: &mut Vec<Placeholder>,
) {
    let (head, tail) = template
        .split_once(TEXT_SLOT)
        .expect("template without text slot");
    let base = out.len();
    for (kind, marker) in [(MarkerKind::Node, NODE_MARKER), (MarkerKind::Pairwise, PAIRWISE_MARKER)] {
        for (pos, _) in head.match_indices(marker) {
            placeholders.push(Placeholder {
                kind,
                segment,
                offset: base + pos,
                node,
            });
        }
    }
    out.push_str(head);
    out.push_str(&sanitize_text(text));
    out.push_str(tail);
}

/// Shared part of every candidate prompt for one source and example set.
#[derive(Clone, Debug)]
pub struct PromptBuilder {
    prefix: Arc<str>,
    prefix_placeholders: Vec<Placeholder>,
}

impl PromptBuilder {
    pub fn link_prediction(source: PromptNode<'_>, examples: &IclExamples) -> Self {
        let mut prefix = String::new();
        let mut placeholders = Vec::new();
        render_into(&mut prefix, SOURCE_BLOCK, source.text, source.id, Segment::Prefix, &mut placeholders);
        prefix.push_str(BLOCK_SEPARATOR);
        // positives and negatives alternate so neither label clusters
        let pairs = examples.positives.iter().zip(&examples.negatives);
        for (pos, neg) in pairs {
            for (ex, answer) in [(pos, ANSWER_YES), (neg, ANSWER_NO)] {
                render_into(&mut prefix, CANDIDATE_BLOCK, &ex.text, ex.node, Segment::Prefix, &mut placeholders);
                prefix.push(' ');
                prefix.push_str(answer);
                prefix.push_str(BLOCK_SEPARATOR);
            }
        }
        PromptBuilder {
            prefix: prefix.into(),
            prefix_placeholders: placeholders,
        }
    }

    pub fn neighbor_prediction(source: PromptNode<'_>) -> Self {
        let mut prefix = String::new();
        let mut placeholders = Vec::new();
        render_into(&mut prefix, SOURCE_BLOCK, source.text, source.id, Segment::Prefix, &mut placeholders);
        prefix.push_str(NEIGHBOR_QUESTION);
        PromptBuilder {
            prefix: prefix.into(),
            prefix_placeholders: placeholders,
        }
    }

    pub fn shared_prefix(&self) -> &Arc<str> {
        &self.prefix
    }

    pub fn candidate(&self, candidate: PromptNode<'_>) -> PromptParts {
        let mut suffix = String::new();
        let mut placeholders = self.prefix_placeholders.clone();
        render_into(&mut suffix, CANDIDATE_BLOCK, candidate.text, candidate.id, Segment::Suffix, &mut placeholders);
        PromptParts {
            shared_prefix: Arc::clone(&self.prefix),
            candidate_suffix: suffix,
            placeholders,
        }
    }

    /// The prefix alone, with an empty suffix (neighbor prediction).
    pub fn prefix_only(&self) -> PromptParts {
        PromptParts {
            shared_prefix: Arc::clone(&self.prefix),
            candidate_suffix: String::new(),
            placeholders: self.prefix_placeholders.clone(),
        }
    }
}

pub fn assemble_prompt(
    source: PromptNode<'_>,
    candidate: Option<PromptNode<'_>>,
    examples: &IclExamples,
    mode: PromptMode,
) -> PromptParts {
    match (mode, candidate) {
        (PromptMode::LinkPrediction, Some(c)) => PromptBuilder::link_prediction(source, examples).candidate(c),
        (PromptMode::LinkPrediction, None) => PromptBuilder::link_prediction(source, examples).prefix_only(),
        (PromptMode::NeighborPrediction, _) => PromptBuilder::neighbor_prediction(source).prefix_only(),
    }
}

/// `p(Yes) / (p(Yes) + p(No))` from the two logits, with the max
/// subtracted before exponentiating.
pub fn yes_no_index(yes_logit: f64, no_logit: f64) -> f64 {
    let m = yes_logit.max(no_logit);
    let y = (yes_logit - m).exp();
    let n = (no_logit - m).exp();
    y / (y + n)
}

/// Rank of the positive: 1-based, or infinite when it was not ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "Option<usize>", into = "Option<usize>")]
pub enum Rank {
    Finite(usize),
    Infinite,
}

impl From<Option<usize>> for Rank {
    fn from(v: Option<usize>) -> Self {
        v.map_or(Rank::Infinite, Rank::Finite)
    }
}

impl From<Rank> for Option<usize> {
    fn from(r: Rank) -> Self {
        match r {
            Rank::Finite(k) => Some(k),
            Rank::Infinite => None,
        }
    }
}

impl Rank {
    pub fn reciprocal(self) -> f64 {
        match self {
            Rank::Finite(k) => 1.0 / k as f64,
            Rank::Infinite => 0.0,
        }
    }

    pub fn within(self, k: usize) -> bool {
        matches!(self, Rank::Finite(r) if r <= k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateFailure {
    pub candidate: NodeId,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub source: NodeId,
    pub positive: NodeId,
    /// Candidates by descending score; failed candidates trail, by id.
    pub ordering: Vec<NodeId>,
    /// Yes/No index aligned with `ordering`; `None` for failed candidates.
    pub scores: Vec<Option<f64>>,
    pub rank_of_positive: Rank,
    pub failures: Vec<CandidateFailure>,
    /// Scoring calls issued to the provider.
    pub provider_calls: usize,
}

impl RankedList {
    /// Order scored candidates: descending score, the positive after any
    /// tied candidate, then ascending id. Unscored candidates go last.
    pub fn from_scores(
        source: NodeId,
        positive: NodeId,
        scored: Vec<(NodeId, Option<f64>)>,
        failures: Vec<CandidateFailure>,
        provider_calls: usize,
    ) -> Self {
        let mut scored = scored;
        scored.sort_by(|a, b| match (a.1, b.1) {
            (Some(x), Some(y)) => y
                .total_cmp(&x)
                .then((a.0 == positive).cmp(&(b.0 == positive)))
                .then(a.0.cmp(&b.0)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.0.cmp(&b.0),
        });
        let rank_of_positive = scored
            .iter()
            .position(|(c, s)| *c == positive && s.is_some())
            .map_or(Rank::Infinite, |p| Rank::Finite(p + 1));
        let (ordering, scores) = scored.into_iter().unzip();
        RankedList {
            source,
            positive,
            ordering,
            scores,
            rank_of_positive,
            failures,
            provider_calls,
        }
    }

    /// Rank the positive would get if ties were broken in its favor.
    pub fn optimistic_rank(&self) -> Rank {
        let Rank::Finite(p) = self.rank_of_positive else {
            return Rank::Infinite;
        };
        let pos_score = self.scores[p - 1].expect("ranked positive has a score");
        let better = self
            .scores
            .iter()
            .filter(|s| matches!(s, Some(x) if *x > pos_score))
            .count();
        Rank::Finite(better + 1)
    }
}

/// Score every candidate through `provider` with a shared-prefix prompt and
/// rank them.
pub fn rerank_candidates(
    provider: &dyn LogitProvider,
    graph: &TextAttributedGraph,
    candidates: &CandidateSet,
    examples: &IclExamples,
    config: &RerankConfig,
    exec: Execution,
) -> Result<RankedList, RerankError> {
    if candidates.is_empty() {
        return Err(RerankError::NoCandidates);
    }
    let source = candidates.source;
    let builder = PromptBuilder::link_prediction(
        PromptNode {
            id: source,
            text: graph.text(source),
        },
        examples,
    );
    if provider.capabilities().supports_prefix_reuse {
        if let Err(e) = provider.prepare_prefix(builder.shared_prefix()) {
            if config.strict {
                return Err(RerankError::Provider {
                    candidate: source,
                    source: e,
                });
            }
            log::warn!("prefix warm-up failed for source {source}: {e}");
        }
    }
    let results = par::map(exec, &candidates.candidates, |&c| {
        let prompt = builder.candidate(PromptNode {
            id: c,
            text: graph.text(c),
        });
        if prompt.shared_prefix.as_bytes() != builder.shared_prefix().as_bytes() {
            return Err(RerankError::PrefixMismatch { candidate: c });
        }
        let request = ScoreRequest {
            source,
            candidate: c,
            prompt: &prompt,
        };
        provider
            .logits(&request)
            .and_then(|l| l.checked())
            .map(|l| yes_no_index(l.yes, l.no))
            .map_err(|e| RerankError::Provider {
                candidate: c,
                source: e,
            })
    });
    let mut scored = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (&c, result) in candidates.candidates.iter().zip(results) {
        match result {
            Ok(s) => scored.push((c, Some(s))),
            Err(e @ RerankError::PrefixMismatch { .. }) => return Err(e),
            Err(e) if config.strict => return Err(e),
            Err(e) => {
                log::warn!("{e}");
                failures.push(CandidateFailure {
                    candidate: c,
                    error: e.to_string(),
                });
                scored.push((c, None));
            }
        }
    }
    Ok(RankedList::from_scores(
        source,
        candidates.positive,
        scored,
        failures,
        candidates.len(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> TextAttributedGraph {
        let nodes = (0..n).map(|i| (i.to_string(), format!("node {i}"))).collect();
        TextAttributedGraph::from_parts(nodes, edges.iter().copied())
            .unwrap()
            .0
    }

    #[test]
    fn zero_shot_link_prompt() {
        let p = assemble_prompt(
            PromptNode { id: 0, text: "Granite  basin\nstudy" },
            Some(PromptNode { id: 5, text: "Lava flows" }),
            &IclExamples::default(),
            PromptMode::LinkPrediction,
        );
        assert_eq!(&*p.shared_prefix, "This is the source node. <NODE> Text: Granite basin study.\n\n");
        assert_eq!(
            p.candidate_suffix,
            "This is another node. <NODE> <PAIRWISE> Text: Lava flows. Is this node connected with the source node? Answer:"
        );
        let node_markers: Vec<_> = p.placeholders.iter().filter(|m| m.kind == MarkerKind::Node).collect();
        assert_eq!(node_markers.len(), 2);
        for m in &p.placeholders {
            let seg = match m.segment {
                Segment::Prefix => &*p.shared_prefix,
                Segment::Suffix => p.candidate_suffix.as_str(),
            };
            let marker = match m.kind {
                MarkerKind::Node => NODE_MARKER,
                MarkerKind::Pairwise => PAIRWISE_MARKER,
            };
            assert!(seg[m.offset..].starts_with(marker));
        }
    }

    #[test]
    fn examples_carry_answers_and_prefix_is_shared() {
        let ex = IclExamples {
            positives: vec![IclExample { node: 1, text: "pos".into() }],
            negatives: vec![IclExample { node: 2, text: "".into() }],
            seed: 0,
            truncated: false,
        };
        let src = PromptNode { id: 0, text: "src" };
        let a = assemble_prompt(src, Some(PromptNode { id: 3, text: "a" }), &ex, PromptMode::LinkPrediction);
        let b = assemble_prompt(src, Some(PromptNode { id: 4, text: "b" }), &ex, PromptMode::LinkPrediction);
        assert_eq!(a.shared_prefix.as_bytes(), b.shared_prefix.as_bytes());
        assert!(a.shared_prefix.contains("Text: pos. Is this node connected with the source node? Answer: Yes\n\n"));
        assert!(a.shared_prefix.contains("Text: (no text). Is this node connected with the source node? Answer: No\n\n"));
        assert!(a.full_text().ends_with("Answer:"));
    }

    #[test]
    fn neighbor_prompt_ending() {
        let p = assemble_prompt(
            PromptNode { id: 0, text: "src" },
            None,
            &IclExamples::default(),
            PromptMode::NeighborPrediction,
        );
        assert_eq!(
            p.full_text(),
            "This is the source node. <NODE> Text: src. What nodes are connected with it? \n\nAnswer:"
        );
    }

    #[test]
    fn yes_no_index_values() {
        assert_eq!(yes_no_index(3.7, 3.7), 0.5);
        assert!((yes_no_index(2.0, 0.0) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((yes_no_index(2.0, 0.0) - 0.8808).abs() < 1e-4);
        assert!(yes_no_index(800.0, -800.0) > 0.999);
        assert_eq!(yes_no_index(1000.0, 1000.0), 0.5);
    }

    #[test]
    fn icl_examples_respect_neighborhoods() {
        let g = graph(8, &[(0, 1), (0, 2), (0, 3), (4, 5)]);
        let ex = select_icl_examples(&g, 0, 2, 9).unwrap();
        assert_eq!(ex.len(), 2);
        assert!(!ex.truncated);
        assert!(ex.positives.iter().all(|e| g.has_edge(0, e.node)));
        assert!(ex.negatives.iter().all(|e| e.node != 0 && !g.has_edge(0, e.node)));
        assert_eq!(ex, select_icl_examples(&g, 0, 2, 9).unwrap());
        assert!(select_icl_examples(&g, 0, 0, 9).unwrap().is_empty());
    }

    #[test]
    fn icl_truncates_to_available_neighbors() {
        let g = graph(6, &[(0, 1)]);
        let ex = select_icl_examples(&g, 0, 2, 1).unwrap();
        assert_eq!((ex.positives.len(), ex.negatives.len()), (1, 1));
        assert!(ex.truncated);
        assert!(matches!(
            select_icl_examples(&g, 0, 3, 1),
            Err(RerankError::GraphTooSmall { nodes: 6, k: 3 })
        ));
    }

    #[test]
    fn pessimistic_ties() {
        let scored = vec![(4, Some(0.5)), (2, Some(0.5)), (9, Some(0.5))];
        let r = RankedList::from_scores(0, 2, scored, vec![], 3);
        assert_eq!(r.ordering, vec![4, 9, 2]);
        assert_eq!(r.rank_of_positive, Rank::Finite(3));
        assert_eq!(r.optimistic_rank(), Rank::Finite(1));
    }

    #[test]
    fn failed_positive_is_unranked() {
        let scored = vec![(1, Some(0.9)), (2, None), (3, Some(0.1))];
        let r = RankedList::from_scores(0, 2, scored, vec![], 3);
        assert_eq!(r.ordering, vec![1, 3, 2]);
        assert_eq!(r.rank_of_positive, Rank::Infinite);
        assert_eq!(r.rank_of_positive.reciprocal(), 0.0);
    }

    #[test]
    fn rank_serializes_as_nullable_integer() {
        assert_eq!(serde_json::to_string(&Rank::Finite(3)).unwrap(), "3");
        assert_eq!(serde_json::to_string(&Rank::Infinite).unwrap(), "null");
        assert_eq!(serde_json::from_str::<Rank>("null").unwrap(), Rank::Infinite);
    }
}
