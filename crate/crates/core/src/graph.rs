//! Text-attributed graph model, JSONL ingestion, edge splits and hop queries.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense node index, assigned in node-file order.
pub type NodeId = usize;

const GRAPH_FORMAT: &str = "linkrr-graph";
const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: edge endpoint `{endpoint}` is not a known node id")]
    DanglingEdge {
        path: PathBuf,
        line: usize,
        endpoint: String,
    },
    #[error("{path}:{line}: duplicate node id `{id}`")]
    DuplicateNode {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("edge ({0}, {1}) references a node outside the graph")]
    EdgeOutOfRange(NodeId, NodeId),
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("cannot split a graph with no edges")]
    EmptySplit,
    #[error("split does not match graph: {0}")]
    SplitMismatch(String),
    #[error("graph file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraphError + '_ {
    move |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Undirected edge stored with the smaller endpoint first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge(pub NodeId, pub NodeId);

impl Edge {
    pub fn new(u: NodeId, v: NodeId) -> Self {
        if u <= v {
            Edge(u, v)
        } else {
            Edge(v, u)
        }
    }
}

/// Counts of input rows dropped while building a simple graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub self_loops_dropped: usize,
    pub duplicate_edges_dropped: usize,
}

/// Simple undirected graph whose nodes carry free text.
///
/// Adjacency lists are sorted, deduplicated and symmetric, with no
/// self-loops. The graph is immutable once built.
#[derive(Clone, Debug)]
pub struct TextAttributedGraph {
    ids: Vec<String>,
    texts: Vec<String>,
    adjacency: Vec<Vec<NodeId>>,
    index: HashMap<String, NodeId>,
    edge_count: usize,
}

impl TextAttributedGraph {
    /// Build from per-node `(id, text)` rows and an edge list. Self-loops and
    /// repeated edges are dropped and counted.
    pub fn from_parts(
        nodes: Vec<(String, String)>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
    ) -> Result<(Self, IngestStats), GraphError> {
        let n = nodes.len();
        let mut ids = Vec::with_capacity(n);
        let mut texts = Vec::with_capacity(n);
        let mut index = HashMap::with_capacity(n);
        for (pos, (id, text)) in nodes.into_iter().enumerate() {
            if index.insert(id.clone(), pos).is_some() {
                return Err(GraphError::DuplicateNode {
                    path: PathBuf::new(),
                    line: pos + 1,
                    id,
                });
            }
            ids.push(id);
            texts.push(text);
        }
        let mut stats = IngestStats::default();
        let mut adjacency = vec![Vec::new(); n];
        let mut raw = 0usize;
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(GraphError::EdgeOutOfRange(u, v));
            }
            if u == v {
                stats.self_loops_dropped += 1;
                continue;
            }
            adjacency[u].push(v);
            adjacency[v].push(u);
            raw += 1;
        }
        let mut stored = 0usize;
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
            stored += list.len();
        }
        let edge_count = stored / 2;
        stats.duplicate_edges_dropped = raw - edge_count;
        Ok((
            TextAttributedGraph {
                ids,
                texts,
                adjacency,
                index,
                edge_count,
            },
            stats,
        ))
    }

    /// Same nodes and texts, different edge set. Used to build the observed
    /// (training) view of a graph.
    pub fn with_edges(&self, edges: &[Edge]) -> Result<Self, GraphError> {
        let mut adjacency = vec![Vec::new(); self.node_count()];
        for &Edge(u, v) in edges {
            if u >= adjacency.len() || v >= adjacency.len() {
                return Err(GraphError::EdgeOutOfRange(u, v));
            }
            if u != v {
                adjacency[u].push(v);
                adjacency[v].push(u);
            }
        }
        let mut stored = 0;
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
            stored += list.len();
        }
        Ok(TextAttributedGraph {
            ids: self.ids.clone(),
            texts: self.texts.clone(),
            adjacency,
            index: self.index.clone(),
            edge_count: stored / 2,
        })
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adjacency[v].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        let (small, other) = if self.degree(u) <= self.degree(v) {
            (u, v)
        } else {
            (v, u)
        };
        self.adjacency[small].binary_search(&other).is_ok()
    }

    pub fn text(&self, v: NodeId) -> &str {
        &self.texts[v]
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    /// Original string id of a node.
    pub fn name(&self, v: NodeId) -> &str {
        &self.ids[v]
    }

    pub fn lookup(&self, id: &str) -> Option<NodeId> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, v: NodeId) -> bool {
        v < self.node_count()
    }

    /// All edges, min endpoint first, in ascending order.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::with_capacity(self.edge_count);
        for (u, list) in self.adjacency.iter().enumerate() {
            out.extend(list.iter().filter(|&&v| v > u).map(|&v| Edge(u, v)));
        }
        out
    }

    /// BFS distances from `v`, truncated at `max_depth`. Unreached nodes are
    /// `None`.
    pub fn distances_within(&self, v: NodeId, max_depth: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.node_count()];
        dist[v] = Some(0);
        let mut queue = VecDeque::from([v]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap_or(0);
            if d == max_depth {
                continue;
            }
            for &w in self.neighbors(u) {
                if dist[w].is_none() {
                    dist[w] = Some(d + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Nodes at shortest-path distance exactly `k` from `v`, ascending.
    pub fn k_hop_neighbors(&self, v: NodeId, k: usize) -> Vec<NodeId> {
        if k == 0 {
            return Vec::new();
        }
        let mut frontier = vec![v];
        let mut seen = vec![false; self.node_count()];
        seen[v] = true;
        for _ in 0..k {
            let mut next = Vec::new();
            for &u in &frontier {
                for &w in self.neighbors(u) {
                    if !seen[w] {
                        seen[w] = true;
                        next.push(w);
                    }
                }
            }
            if next.is_empty() {
                return next;
            }
            frontier = next;
        }
        frontier.sort_unstable();
        frontier
    }
}

#[derive(Deserialize)]
struct NodeRow {
    id: String,
    text: String,
}

#[derive(Deserialize)]
struct EdgeRow {
    src: String,
    dst: String,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<Vec<(usize, T)>, GraphError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| GraphError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        rows.push((i + 1, row));
    }
    Ok(rows)
}

/// Ingest a node JSONL file (`id`, `text`) and an edge JSONL file
/// (`src`, `dst`).
pub fn load_jsonl(
    nodes_path: &Path,
    edges_path: &Path,
) -> Result<(TextAttributedGraph, IngestStats), GraphError> {
    let node_rows: Vec<(usize, NodeRow)> = read_jsonl(nodes_path)?;
    let mut seen = HashMap::with_capacity(node_rows.len());
    let mut nodes = Vec::with_capacity(node_rows.len());
    for (line, row) in node_rows {
        if seen.insert(row.id.clone(), nodes.len()).is_some() {
            return Err(GraphError::DuplicateNode {
                path: nodes_path.to_path_buf(),
                line,
                id: row.id,
            });
        }
        nodes.push((row.id, row.text));
    }
    let edge_rows: Vec<(usize, EdgeRow)> = read_jsonl(edges_path)?;
    let mut edges = Vec::with_capacity(edge_rows.len());
    for (line, row) in edge_rows {
        let resolve = |endpoint: &str| {
            seen.get(endpoint)
                .copied()
                .ok_or_else(|| GraphError::DanglingEdge {
                    path: edges_path.to_path_buf(),
                    line,
                    endpoint: endpoint.to_string(),
                })
        };
        edges.push((resolve(&row.src)?, resolve(&row.dst)?));
    }
    let (graph, stats) = TextAttributedGraph::from_parts(nodes, edges)?;
    if stats.self_loops_dropped > 0 || stats.duplicate_edges_dropped > 0 {
        log::warn!(
            "dropped {} self-loop(s) and {} duplicate edge(s) during ingest",
            stats.self_loops_dropped,
            stats.duplicate_edges_dropped
        );
    }
    Ok((graph, stats))
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    format: String,
    version: u32,
    nodes: Vec<GraphFileNode>,
    edges: Vec<Edge>,
}

#[derive(Serialize, Deserialize)]
struct GraphFileNode {
    id: String,
    text: String,
}

pub fn save_graph(graph: &TextAttributedGraph, path: &Path) -> Result<(), GraphError> {
    let file = GraphFile {
        format: GRAPH_FORMAT.to_string(),
        version: GRAPH_VERSION,
        nodes: graph
            .ids
            .iter()
            .zip(&graph.texts)
            .map(|(id, text)| GraphFileNode {
                id: id.clone(),
                text: text.clone(),
            })
            .collect(),
        edges: graph.edges(),
    };
    let out = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(out);
    serde_json::to_writer(&mut out, &file).map_err(|e| GraphError::Format(e.to_string()))?;
    out.flush().map_err(io_err(path))
}

/// Load a graph previously written by [`save_graph`].
pub fn load_graph(path: &Path) -> Result<TextAttributedGraph, GraphError> {
    let file = File::open(path).map_err(io_err(path))?;
    let parsed: GraphFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| GraphError::Format(format!("{}: {e}", path.display())))?;
    if parsed.format != GRAPH_FORMAT || parsed.version != GRAPH_VERSION {
        return Err(GraphError::Format(format!(
            "{}: expected {GRAPH_FORMAT} v{GRAPH_VERSION}, found {} v{}",
            path.display(),
            parsed.format,
            parsed.version
        )));
    }
    let nodes = parsed.nodes.into_iter().map(|n| (n.id, n.text)).collect();
    let edges = parsed.edges.into_iter().map(|Edge(u, v)| (u, v));
    Ok(TextAttributedGraph::from_parts(nodes, edges)?.0)
}

/// Disjoint train/valid/test partition of a graph's edges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSplit {
    pub train: Vec<Edge>,
    pub valid: Vec<Edge>,
    pub test: Vec<Edge>,
    pub seed: u64,
}

impl EdgeSplit {
    /// Check that the split partitions exactly the edges of `graph`.
    pub fn validate(&self, graph: &TextAttributedGraph) -> Result<(), GraphError> {
        let mut all: Vec<Edge> = self
            .train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .copied()
            .collect();
        all.sort_unstable();
        let before = all.len();
        all.dedup();
        if all.len() != before {
            return Err(GraphError::SplitMismatch("splits overlap".into()));
        }
        if all != graph.edges() {
            return Err(GraphError::SplitMismatch(
                "union of splits differs from the graph's edge set".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        let out = File::create(path).map_err(io_err(path))?;
        serde_json::to_writer(BufWriter::new(out), self)
            .map_err(|e| GraphError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let file = File::open(path).map_err(io_err(path))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| GraphError::Format(format!("{}: {e}", path.display())))
    }
}

/// Shuffle the edge set with a seeded RNG and cut it by `ratios`.
///
/// Valid and test sizes are `floor(r * |E|)`; the remainder goes to train.
pub fn split_edges(
    graph: &TextAttributedGraph,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<EdgeSplit, GraphError> {
    let (rt, rv, rs) = ratios;
    for (name, r) in [("train", rt), ("valid", rv), ("test", rs)] {
        if !(r > 0.0 && r.is_finite()) {
            return Err(GraphError::InvalidRatios(format!(
                "{name} ratio must be positive, got {r}"
            )));
        }
    }
    if (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(GraphError::InvalidRatios(format!(
            "ratios sum to {}, expected 1",
            rt + rv + rs
        )));
    }
    let mut edges = graph.edges();
    if edges.is_empty() {
        return Err(GraphError::EmptySplit);
    }
    let m = edges.len() as f64;
    // guard against products like 0.05 * 100 landing just below an integer
    let n_valid = (rv * m + 1e-9).floor() as usize;
    let n_test = (rs * m + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);
    let mut test = edges[..n_test].to_vec();
    let mut valid = edges[n_test..n_test + n_valid].to_vec();
    let mut train = edges[n_test + n_valid..].to_vec();
    test.sort_unstable();
    valid.sort_unstable();
    train.sort_unstable();
    Ok(EdgeSplit {
        train,
        valid,
        test,
        seed,
    })
}
