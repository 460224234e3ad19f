//! Retrieval stage: BM25 over node texts, neighbor-query generation, and
//! distance-grouped candidate selection.

use std::collections::BTreeMap;

use fnv::{FnvHashMap, FnvHashSet};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{NodeId, TextAttributedGraph};
use crate::par::{self, Execution};
use crate::seeded_rng;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("candidate count {n_c} exceeds pool size {pool}")]
    PoolTooSmall { n_c: usize, pool: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("query generator failed: {0}")]
    Generator(String),
    #[error("candidate set invariant violated: {0}")]
    Invariant(String),
}

/// Lowercase, split on every non-alphanumeric character, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub k1: f64,
    pub b: f64,
    /// Share of retrieved candidates drawn from the source's 2-hop ring.
    pub beta: f64,
    pub n_groups: usize,
    pub group_size: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k1: 1.2,
            b: 0.75,
            beta: 0.65,
            n_groups: 5,
            group_size: 3,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.k1 >= 0.0 && self.k1.is_finite()) {
            return Err(format!("retrieval.k1 must be non-negative, got {}", self.k1));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(format!("retrieval.b must be in [0, 1], got {}", self.b));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(format!("retrieval.beta must be in [0, 1], got {}", self.beta));
        }
        if self.n_groups == 0 || self.group_size == 0 {
            return Err("retrieval.n_groups and retrieval.group_size must be positive".into());
        }
        Ok(())
    }
}

/// Inverted index with Okapi BM25 scoring.
///
/// `idf(t) = ln(1 + (D - df + 0.5) / (df + 0.5))`. Query terms are
/// deduplicated before scoring.
#[derive(Clone, Debug)]
pub struct Bm25Index {
    postings: FnvHashMap<String, Vec<(NodeId, u32)>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    /// Index `docs`, doc `i` getting id `i`.
    pub fn build<S: AsRef<str>>(docs: &[S], k1: f64, b: f64) -> Self {
        let mut postings: FnvHashMap<String, Vec<(NodeId, u32)>> = FnvHashMap::default();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for (id, doc) in docs.iter().enumerate() {
            let tokens = tokenize(doc.as_ref());
            doc_lengths.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((id, count));
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            total as f64 / doc_lengths.len() as f64
        };
        Bm25Index {
            postings,
            doc_lengths,
            avg_doc_length,
            k1,
            b,
        }
    }

    pub fn for_graph(graph: &TextAttributedGraph, config: &RetrievalConfig) -> Self {
        Self::build(graph.texts(), config.k1, config.b)
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn doc_length(&self, doc: NodeId) -> u32 {
        self.doc_lengths[doc]
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let d = self.doc_count() as f64;
        let df = self.document_frequency(term) as f64;
        (1.0 + (d - df + 0.5) / (df + 0.5)).ln()
    }

    fn unique_terms(query: &str) -> Vec<String> {
        let mut seen = FnvHashSet::default();
        tokenize(query)
            .into_iter()
            .filter(|t| seen.insert(t.clone()))
            .collect()
    }

    /// Nonzero BM25 scores of every document for `query`.
    pub fn score_all(&self, query: &str) -> FnvHashMap<NodeId, f64> {
        let mut scores: FnvHashMap<NodeId, f64> = FnvHashMap::default();
        for term in Self::unique_terms(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for &(doc, tf) in list {
                let tf = tf as f64;
                let norm = if self.avg_doc_length > 0.0 {
                    1.0 - self.b + self.b * self.doc_lengths[doc] as f64 / self.avg_doc_length
                } else {
                    1.0
                };
                *scores.entry(doc).or_insert(0.0) += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
            }
        }
        scores.retain(|_, s| *s > 0.0);
        scores
    }

    pub fn score(&self, query: &str, doc: NodeId) -> f64 {
        self.score_all(query).get(&doc).copied().unwrap_or(0.0)
    }
}

/// Top-`k` pool members by BM25 score, descending, ties by ascending id.
/// Documents scoring zero are never returned.
pub fn bm25_topk(index: &Bm25Index, query: &str, pool: &[NodeId], k: usize) -> Vec<(NodeId, f64)> {
    let scores = index.score_all(query);
    let mut hits: Vec<(NodeId, f64)> = pool
        .iter()
        .filter_map(|&d| scores.get(&d).map(|&s| (d, s)))
        .collect();
    hits.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    hits.dedup_by_key(|h| h.0);
    hits.truncate(k);
    hits
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diversity {
    /// Deterministic template queries.
    Template,
    /// Grouped diverse decoding by the backend.
    Grouped,
    /// Independent sampled decodes standing in for grouped decoding.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub queries: Vec<String>,
    /// Group index of each query.
    pub groups: Vec<usize>,
    pub diversity: Diversity,
    /// Number of empty generations replaced by the source text.
    pub substitutions: usize,
}

impl QuerySet {
    pub fn from_groups(groups: Vec<Vec<String>>, diversity: Diversity, substitutions: usize) -> Self {
        let mut queries = Vec::new();
        let mut idx = Vec::new();
        for (g, group) in groups.into_iter().enumerate() {
            for q in group {
                queries.push(q);
                idx.push(g);
            }
        }
        QuerySet {
            queries,
            groups: idx,
            diversity,
            substitutions,
        }
    }

    pub fn group_count(&self) -> usize {
        self.groups.iter().max().map_or(0, |g| g + 1)
    }
}

/// Inputs a query generator sees for one source node. `graph` is the
/// observed (training) graph.
#[derive(Clone, Copy)]
pub struct QueryRequest<'a> {
    pub graph: &'a TextAttributedGraph,
    pub source: NodeId,
    pub n_groups: usize,
    pub group_size: usize,
    pub seed: u64,
}

/// Produces texts of likely neighbors, used as BM25 queries.
pub trait QueryGenerator: Send + Sync {
    fn generate(&self, request: &QueryRequest<'_>) -> Result<QuerySet, RetrievalError>;
}

const QUERY_STREAM: u64 = 0x5151 << 40;

/// Offline generator: the source text, the source text without its most
/// frequent term, then texts of seeded-sampled observed neighbors, cycling
/// to fill `n_groups * group_size` slots.
#[derive(Clone, Copy, Debug, Default)]
pub struct TemplateGenerator;

/// Source text with every occurrence of its most frequent token removed
/// (ties go to the lexicographically smallest token).
pub fn drop_most_frequent_term(text: &str) -> String {
    let tokens = tokenize(text);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &tokens {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let Some(top) = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(t, _)| t.to_string())
    else {
        return String::new();
    };
    tokens
        .iter()
        .filter(|t| **t != top)
        .cloned()
        .collect::<Vec<_>>()
        .join(" ")
}

impl QueryGenerator for TemplateGenerator {
    fn generate(&self, req: &QueryRequest<'_>) -> Result<QuerySet, RetrievalError> {
        let total = req.n_groups * req.group_size;
        if total == 0 {
            return Err(RetrievalError::InvalidParameter(
                "n_groups * group_size must be positive".into(),
            ));
        }
        let source_text = req.graph.text(req.source).to_string();
        let mut base = vec![source_text.clone(), drop_most_frequent_term(&source_text)];
        let neighbors = req.graph.neighbors(req.source);
        let wanted = total.saturating_sub(2).min(neighbors.len());
        let mut rng = seeded_rng(req.seed, QUERY_STREAM ^ req.source as u64);
        let mut picked: Vec<NodeId> = index::sample(&mut rng, neighbors.len(), wanted)
            .into_iter()
            .map(|i| neighbors[i])
            .collect();
        picked.sort_unstable();
        base.extend(picked.iter().map(|&u| req.graph.text(u).to_string()));
        let queries: Vec<String> = base.iter().cycle().take(total).cloned().collect();
        let groups = (0..total).map(|i| i / req.group_size).collect();
        Ok(QuerySet {
            queries,
            groups,
            diversity: Diversity::Template,
            substitutions: 0,
        })
    }
}

pub fn generate_queries(
    generator: &dyn QueryGenerator,
    request: &QueryRequest<'_>,
) -> Result<QuerySet, RetrievalError> {
    let set = generator.generate(request)?;
    let expected = request.n_groups * request.group_size;
    if set.queries.len() != expected || set.groups.len() != expected {
        return Err(RetrievalError::Generator(format!(
            "expected {expected} queries, generator returned {}",
            set.queries.len()
        )));
    }
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Near,
    Far,
    Sampled,
}

/// One source with its candidate targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub source: NodeId,
    pub candidates: Vec<NodeId>,
    /// The held-out true target; it may be missing from `candidates` after
    /// retrieval.
    pub positive: NodeId,
    pub provenance: Vec<Provenance>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn contains_positive(&self) -> bool {
        self.candidates.contains(&self.positive)
    }

    pub fn check(&self) -> Result<(), RetrievalError> {
        if self.provenance.len() != self.candidates.len() {
            return Err(RetrievalError::Invariant("provenance length differs".into()));
        }
        let mut seen = FnvHashSet::default();
        for &c in &self.candidates {
            if c == self.source {
                return Err(RetrievalError::Invariant("source among candidates".into()));
            }
            if !seen.insert(c) {
                return Err(RetrievalError::Invariant(format!("duplicate candidate {c}")));
            }
        }
        Ok(())
    }
}

/// Maximum BM25 score over all queries for each pool member, in pool order.
pub fn max_query_scores(
    index: &Bm25Index,
    queries: &QuerySet,
    pool: &[NodeId],
    exec: Execution,
) -> Vec<f64> {
    let per_query = par::map(exec, &queries.queries, |q| index.score_all(q));
    pool.iter()
        .map(|d| {
            per_query
                .iter()
                .map(|s| s.get(d).copied().unwrap_or(0.0))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Narrow `pool` to `n_c` candidates: `floor(beta * n_c)` from the source's
/// 2-hop ring and the rest from outside it, each by descending max-query
/// BM25 score (ties by ascending id). A group that runs short is backfilled
/// from the other.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_candidates(
    graph: &TextAttributedGraph,
    index: &Bm25Index,
    source: NodeId,
    queries: &QuerySet,
    pool: &CandidateSet,
    n_c: usize,
    beta: f64,
    exec: Execution,
) -> Result<CandidateSet, RetrievalError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(RetrievalError::InvalidParameter(format!(
            "beta must be in [0, 1], got {beta}"
        )));
    }
    if n_c == 0 {
        return Err(RetrievalError::InvalidParameter("n_c must be positive".into()));
    }
    if n_c > pool.len() {
        return Err(RetrievalError::PoolTooSmall {
            n_c,
            pool: pool.len(),
        });
    }
    let two_hop: FnvHashSet<NodeId> = graph.k_hop_neighbors(source, 2).into_iter().collect();
    let scores = max_query_scores(index, queries, &pool.candidates, exec);
    let mut near = Vec::new();
    let mut far = Vec::new();
    for (&node, &s) in pool.candidates.iter().zip(&scores) {
        if two_hop.contains(&node) {
            near.push((node, s));
        } else {
            far.push((node, s));
        }
    }
    let by_score = |x: &(NodeId, f64), y: &(NodeId, f64)| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0));
    near.sort_by(by_score);
    far.sort_by(by_score);

    let want_near = (beta * n_c as f64 + 1e-9).floor() as usize;
    let want_far = n_c - want_near;
    let mut take_near = want_near.min(near.len());
    let mut take_far = want_far.min(far.len());
    let short = n_c - take_near - take_far;
    if take_near < want_near {
        take_far += short;
    } else {
        take_near += short;
    }
    let mut candidates = Vec::with_capacity(n_c);
    let mut provenance = Vec::with_capacity(n_c);
    for &(node, _) in &near[..take_near] {
        candidates.push(node);
        provenance.push(Provenance::Near);
    }
    for &(node, _) in &far[..take_far] {
        candidates.push(node);
        provenance.push(Provenance::Far);
    }
    let out = CandidateSet {
        source,
        candidates,
        positive: pool.positive,
        provenance,
    };
    out.check()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_with_texts(texts: &[&str], edges: &[(usize, usize)]) -> TextAttributedGraph {
        let nodes = texts
            .iter()
            .enumerate()
            .map(|(i, t)| (i.to_string(), t.to_string()))
            .collect();
        TextAttributedGraph::from_parts(nodes, edges.iter().copied())
            .unwrap()
            .0
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Hello, World!  foo_bar 42x"), vec!["hello", "world", "foo", "bar", "42x"]);
        assert!(tokenize(" -- ").is_empty());
    }

    #[test]
    fn document_frequencies() {
        let idx = Bm25Index::build(&["a b", "a"], 1.2, 0.75);
        assert_eq!(idx.document_frequency("a"), 2);
        assert_eq!(idx.document_frequency("b"), 1);
        assert_eq!(idx.avg_doc_length(), 1.5);
    }

    #[test]
    fn absent_term_contributes_nothing() {
        let idx = Bm25Index::build(&["red fox", "blue fox"], 1.2, 0.75);
        assert_eq!(idx.score("red", 1), 0.0);
        assert_eq!(idx.score("red zebra", 0), idx.score("red", 0));
    }

    #[test]
    fn singleton_pool_and_empty_results() {
        let idx = Bm25Index::build(&["lava flow", "ash cloud", "lava lava lava"], 1.2, 0.75);
        let hits = bm25_topk(&idx, "lava ash", &[1], 5);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, 1);
        assert!(bm25_topk(&idx, "granite", &[0, 1, 2], 5).is_empty());
        assert!(bm25_topk(&idx, "lava", &[], 5).is_empty());
    }

    #[test]
    fn drop_most_frequent() {
        assert_eq!(drop_most_frequent_term("b a b c a b"), "a c a");
        assert_eq!(drop_most_frequent_term("x y"), "y");
        assert_eq!(drop_most_frequent_term(""), "");
    }

    #[test]
    fn template_queries_fill_groups() {
        let g = graph_with_texts(
            &["source text here", "n one", "n two", "n three", "island"],
            &[(0, 1), (0, 2), (0, 3)],
        );
        let req = QueryRequest {
            graph: &g,
            source: 0,
            n_groups: 5,
            group_size: 3,
            seed: 4,
        };
        let set = generate_queries(&TemplateGenerator, &req).unwrap();
        assert_eq!(set.queries.len(), 15);
        assert_eq!(set.group_count(), 5);
        assert_eq!(set.groups[14], 4);
        assert_eq!(set.queries[0], "source text here");
        assert_eq!(set, generate_queries(&TemplateGenerator, &req).unwrap());

        let iso = QueryRequest { source: 4, ..req };
        let set = generate_queries(&TemplateGenerator, &iso).unwrap();
        assert!(set.queries.iter().all(|q| q == "island" || q.is_empty()));
    }

    fn pool(source: NodeId, ids: &[NodeId], positive: NodeId) -> CandidateSet {
        CandidateSet {
            source,
            candidates: ids.to_vec(),
            positive,
            provenance: vec![Provenance::Sampled; ids.len()],
        }
    }

    #[test]
    fn too_large_n_c_rejected() {
        let g = graph_with_texts(&["a", "b", "c"], &[]);
        let idx = Bm25Index::for_graph(&g, &RetrievalConfig::default());
        let qs = QuerySet::from_groups(vec![vec!["a".into()]], Diversity::Template, 0);
        let err = retrieve_candidates(&g, &idx, 0, &qs, &pool(0, &[1, 2], 1), 3, 0.5, Execution::Sequential);
        assert!(matches!(err, Err(RetrievalError::PoolTooSmall { n_c: 3, pool: 2 })));
    }

    #[test]
    fn empty_two_hop_ring_backfills_from_far() {
        // source 0 is isolated, so its 2-hop ring is empty
        let texts: Vec<String> = (0..12).map(|i| format!("doc {i}")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let g = graph_with_texts(&refs, &[(1, 2), (3, 4)]);
        let idx = Bm25Index::for_graph(&g, &RetrievalConfig::default());
        let qs = QuerySet::from_groups(vec![vec!["doc 3".into()]], Diversity::Template, 0);
        let ids: Vec<NodeId> = (1..12).collect();
        let out =
            retrieve_candidates(&g, &idx, 0, &qs, &pool(0, &ids, 3), 6, 1.0, Execution::Sequential).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.provenance.iter().all(|p| *p == Provenance::Far));
        assert_eq!(out.candidates[0], 3);
    }
}
