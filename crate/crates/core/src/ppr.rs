//! Personalized PageRank by forward push, context-node selection and the
//! relative positional encoding built from two PPR scores.

use std::collections::VecDeque;
use std::sync::{Arc, RwLock};

use fnv::FnvHashMap;
use serde::{Deserialize, Serialize};

use crate::graph::{NodeId, TextAttributedGraph};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PprConfig {
    /// Teleport (restart) probability.
    pub alpha: f64,
    /// Push threshold: a node is pushed while `residual >= epsilon * degree`.
    pub epsilon: f64,
}

impl Default for PprConfig {
    fn default() -> Self {
        PprConfig {
            alpha: 0.15,
            epsilon: 1e-5,
        }
    }
}

impl PprConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(format!("ppr.alpha must be in (0, 1), got {}", self.alpha));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(format!("ppr.epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Sparse PPR vector relative to `source`.
#[derive(Clone, Debug)]
pub struct PprScores {
    pub source: NodeId,
    pub alpha: f64,
    pub epsilon: f64,
    scores: FnvHashMap<NodeId, f64>,
}

impl PprScores {
    pub fn get(&self, node: NodeId) -> f64 {
        self.scores.get(&node).copied().unwrap_or(0.0)
    }

    /// Nonzero entries in ascending node order.
    pub fn entries(&self) -> Vec<(NodeId, f64)> {
        let mut out: Vec<_> = self.scores.iter().map(|(&k, &v)| (k, v)).collect();
        out.sort_unstable_by_key(|e| e.0);
        out
    }

    pub fn support_len(&self) -> usize {
        self.scores.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.entries().iter().map(|e| e.1).sum()
    }
}

/// Forward-push approximation of the PPR vector of `source`.
///
/// Every node left with residual mass satisfies `r(u) < epsilon * deg(u)`
/// on return. The push order is FIFO over adjacency order, so results are
/// deterministic.
pub fn personalized_pagerank(
    graph: &TextAttributedGraph,
    source: NodeId,
    config: &PprConfig,
) -> PprScores {
    let alpha = config.alpha;
    let eps = config.epsilon;
    let mut estimate: FnvHashMap<NodeId, f64> = FnvHashMap::default();
    if graph.degree(source) == 0 {
        estimate.insert(source, 1.0);
        return PprScores {
            source,
            alpha,
            epsilon: eps,
            scores: estimate,
        };
    }
    let mut residual: FnvHashMap<NodeId, f64> = FnvHashMap::default();
    residual.insert(source, 1.0);
    let mut queue = VecDeque::from([source]);
    let mut queued: FnvHashMap<NodeId, ()> = FnvHashMap::default();
    queued.insert(source, ());
    while let Some(u) = queue.pop_front() {
        queued.remove(&u);
        let deg = graph.degree(u);
        let r = residual.get(&u).copied().unwrap_or(0.0);
        if r < eps * deg as f64 {
            continue;
        }
        residual.insert(u, 0.0);
        *estimate.entry(u).or_insert(0.0) += alpha * r;
        let share = (1.0 - alpha) * r / deg as f64;
        for &w in graph.neighbors(u) {
            let rw = residual.entry(w).or_insert(0.0);
            *rw += share;
            if *rw >= eps * graph.degree(w) as f64 && !queued.contains_key(&w) {
                queued.insert(w, ());
                queue.push_back(w);
            }
        }
    }
    PprScores {
        source,
        alpha,
        epsilon: eps,
        scores: estimate,
    }
}

/// Per-source memo of PPR vectors over one fixed graph.
///
/// Safe for concurrent readers; a miss computes outside the lock, so two
/// racing threads may both compute the same (identical) vector.
#[derive(Debug, Default)]
pub struct PprCache {
    config: PprConfig,
    entries: RwLock<FnvHashMap<NodeId, Arc<PprScores>>>,
}

impl PprCache {
    pub fn new(config: PprConfig) -> Self {
        PprCache {
            config,
            entries: RwLock::default(),
        }
    }

    pub fn config(&self) -> &PprConfig {
        &self.config
    }

    /// `graph` must be the same graph on every call.
    pub fn get(&self, graph: &TextAttributedGraph, source: NodeId) -> Arc<PprScores> {
        if let Some(hit) = self.entries.read().expect("ppr cache poisoned").get(&source) {
            return Arc::clone(hit);
        }
        let scores = Arc::new(personalized_pagerank(graph, source, &self.config));
        let mut map = self.entries.write().expect("ppr cache poisoned");
        Arc::clone(map.entry(source).or_insert(scores))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("ppr cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// PPR thresholds for context-node selection: `near` applies to direct
/// neighbors of either endpoint, `far` to every other node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextThresholds {
    pub eta_near: f64,
    pub eta_far: f64,
}

impl Default for ContextThresholds {
    fn default() -> Self {
        ContextThresholds {
            eta_near: 0.01,
            eta_far: 1.0,
        }
    }
}

/// Context nodes of the pair `(a, b)` given precomputed PPR vectors: every
/// `u` (other than `a`, `b`) with both `ppr(a,u)` and `ppr(b,u)` at or above
/// its threshold. Ascending order.
pub fn select_context_nodes_with(
    graph: &TextAttributedGraph,
    a: NodeId,
    b: NodeId,
    ppr_a: &PprScores,
    ppr_b: &PprScores,
    thresholds: &ContextThresholds,
) -> Vec<NodeId> {
    // iterate the smaller support; a node must be in both supports to pass
    let (small, other) = if ppr_a.support_len() <= ppr_b.support_len() {
        (ppr_a, ppr_b)
    } else {
        (ppr_b, ppr_a)
    };
    let mut out: Vec<NodeId> = small
        .scores
        .iter()
        .filter(|&(&u, _)| u != a && u != b)
        .filter(|&(&u, &score_small)| {
            let near = graph.has_edge(a, u) || graph.has_edge(b, u);
            let eta = if near {
                thresholds.eta_near
            } else {
                thresholds.eta_far
            };
            score_small >= eta && other.get(u) >= eta
        })
        .map(|(&u, _)| u)
        .collect();
    out.sort_unstable();
    out
}

pub fn select_context_nodes(
    graph: &TextAttributedGraph,
    a: NodeId,
    b: NodeId,
    config: &PprConfig,
    thresholds: &ContextThresholds,
) -> Vec<NodeId> {
    let ppr_a = personalized_pagerank(graph, a, config);
    let ppr_b = personalized_pagerank(graph, b, config);
    select_context_nodes_with(graph, a, b, &ppr_a, &ppr_b, thresholds)
}

/// Number of features in the default positional map.
pub const RPE_MAX_DIM: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RpeConfig {
    /// Leading features of `[p, q, p+q, p*q, ln(1+p), ln(1+q)]` to keep.
    pub dim: usize,
}

impl Default for RpeConfig {
    fn default() -> Self {
        RpeConfig { dim: RPE_MAX_DIM }
    }
}

impl RpeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.dim == 0 || self.dim > RPE_MAX_DIM {
            return Err(format!(
                "rpe.dim must be in 1..={RPE_MAX_DIM}, got {}",
                self.dim
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpeVector(pub Vec<f64>);

/// Fixed feature map of the two PPR scores `p = ppr(a,u)`, `q = ppr(b,u)`:
/// `[p, q, p+q, p*q, ln(1+p), ln(1+q)]`, truncated to `config.dim`.
///
/// Swapping `p` and `q` swaps coordinates 0 and 1 and coordinates 4 and 5;
/// the symmetric coordinates 2 and 3 are unchanged.
pub fn relative_positional_encoding(p: f64, q: f64, config: &RpeConfig) -> RpeVector {
    let full = [p, q, p + q, p * q, p.ln_1p(), q.ln_1p()];
    RpeVector(full[..config.dim].to_vec())
}

/// Coordinate permutation the encoding undergoes when its two inputs swap.
pub const RPE_SWAP: [usize; RPE_MAX_DIM] = [1, 0, 2, 3, 5, 4];
