//! Independent reference implementations used as test oracles.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeSet, HashMap, VecDeque};

use linkrr::rerank::Rank;
use linkrr::TextAttributedGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn graph_from(n: usize, edges: &[(usize, usize)]) -> TextAttributedGraph {
    let nodes = (0..n).map(|i| (format!("v{i}"), format!("text {i}"))).collect();
    TextAttributedGraph::from_parts(nodes, edges.iter().copied())
        .unwrap()
        .0
}

/// Erdos-Renyi graph on `n` nodes with edge probability `p`.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> TextAttributedGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    graph_from(n, &edges)
}

pub fn adjacency(g: &TextAttributedGraph) -> Vec<Vec<f64>> {
    let n = g.node_count();
    let mut a = vec![vec![0.0; n]; n];
    for u in 0..n {
        for &v in g.neighbors(u) {
            a[u][v] = 1.0;
        }
    }
    a
}

/// Fixed point of `pi = alpha e_s + (1 - alpha) pi D^-1 A`, iterated densely.
/// An isolated source keeps all of its mass.
pub fn dense_ppr(g: &TextAttributedGraph, s: usize, alpha: f64) -> Vec<f64> {
    let n = g.node_count();
    let mut pi = vec![0.0; n];
    if g.degree(s) == 0 {
        pi[s] = 1.0;
        return pi;
    }
    let a = adjacency(g);
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        next[s] = alpha;
        for u in 0..n {
            let deg = g.degree(u);
            if deg == 0 || pi[u] == 0.0 {
                continue;
            }
            for v in 0..n {
                if a[u][v] > 0.0 {
                    next[v] += (1.0 - alpha) * pi[u] / deg as f64;
                }
            }
        }
        let delta = next.iter().zip(&pi).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

pub fn neighbor_set(g: &TextAttributedGraph, v: usize) -> BTreeSet<usize> {
    g.neighbors(v).iter().copied().collect()
}

pub fn brute_common_neighbors(g: &TextAttributedGraph, a: usize, b: usize) -> usize {
    neighbor_set(g, a).intersection(&neighbor_set(g, b)).count()
}

pub fn brute_adamic_adar(g: &TextAttributedGraph, a: usize, b: usize) -> f64 {
    neighbor_set(g, a)
        .intersection(&neighbor_set(g, b))
        .map(|&w| 1.0 / (g.degree(w) as f64).ln())
        .sum()
}

fn matmul(x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            if x[i][k] == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += x[i][k] * y[k][j];
            }
        }
    }
    out
}

/// `sum_{l=1..horizon} beta^l (A^l)[a][b]` from explicit matrix powers.
pub fn matrix_katz(g: &TextAttributedGraph, beta: f64, horizon: usize) -> Vec<Vec<f64>> {
    let a = adjacency(g);
    let n = a.len();
    let mut power = a.clone();
    let mut total = vec![vec![0.0; n]; n];
    let mut weight = 1.0;
    for l in 1..=horizon {
        weight *= beta;
        if l > 1 {
            power = matmul(&power, &a);
        }
        for i in 0..n {
            for j in 0..n {
                total[i][j] += weight * power[i][j];
            }
        }
    }
    total
}

/// BFS layers from `v`: `layers[k]` holds nodes at distance exactly `k`.
pub fn bfs_layers(g: &TextAttributedGraph, v: usize) -> Vec<Vec<usize>> {
    let mut dist: HashMap<usize, usize> = HashMap::from([(v, 0)]);
    let mut queue = VecDeque::from([v]);
    while let Some(u) = queue.pop_front() {
        for &w in g.neighbors(u) {
            if !dist.contains_key(&w) {
                dist.insert(w, dist[&u] + 1);
                queue.push_back(w);
            }
        }
    }
    let depth = dist.values().copied().max().unwrap_or(0);
    let mut layers = vec![Vec::new(); depth + 1];
    for (node, d) in dist {
        layers[d].push(node);
    }
    for l in &mut layers {
        l.sort_unstable();
    }
    layers
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Textbook BM25 with `idf = ln(1 + (N - df + 0.5) / (df + 0.5))`, each
/// distinct query term counted once.
pub fn naive_bm25(docs: &[&str], query: &str, doc: usize, k1: f64, b: f64) -> f64 {
    let tokenized: Vec<Vec<String>> = docs.iter().map(|d| words(d)).collect();
    let n = docs.len() as f64;
    let avgdl = tokenized.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut terms = words(query);
    terms.sort();
    terms.dedup();
    let mut score = 0.0;
    for term in terms {
        let df = tokenized.iter().filter(|d| d.contains(&term)).count() as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        let tf = tokenized[doc].iter().filter(|w| **w == term).count() as f64;
        let dl = tokenized[doc].len() as f64;
        score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
    }
    score
}

/// MRR, Hits@1 and Hits@k recomputed from raw optional ranks.
pub fn brute_metrics(ranks: &[Option<usize>], k: usize) -> (f64, f64, f64) {
    let mut rr = 0.0;
    let mut h1 = 0usize;
    let mut hk = 0usize;
    for r in ranks {
        if let Some(r) = *r {
            rr += 1.0 / r as f64;
            if r == 1 {
                h1 += 1;
            }
            if r <= k {
                hk += 1;
            }
        }
    }
    let n = ranks.len() as f64;
    (rr / n, h1 as f64 / n, hk as f64 / n)
}

pub fn to_rank(r: Option<usize>) -> Rank {
    match r {
        Some(k) => Rank::Finite(k),
        None => Rank::Infinite,
    }
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

use linkrr::pairwise::{CombinerParams, PairFeaturizer, Sample, StructureConfig};
use linkrr::ppr::PprCache;
use linkrr::text_align::{ContrastiveBatch, EmbeddingTable};

/// Labeled pairs on a random graph plus a random (non-zero attention)
/// parameter point.
pub fn combiner_point(seed: u64) -> (Vec<Sample>, CombinerParams) {
    let mut r = rng(seed);
    let g = random_graph(&mut r, 14, 0.3);
    let mut structure = StructureConfig::default();
    structure.pairwise.dim = 6;
    let cache = PprCache::new(structure.ppr);
    let featurizer = PairFeaturizer::new(&g, &cache, structure);
    let samples: Vec<Sample> = (0..8)
        .map(|i| {
            let a = r.random_range(0..14);
            let b = (a + 1 + r.random_range(0..13)) % 14;
            Sample {
                context: featurizer.context(a, b),
                label: i % 2 == 0,
            }
        })
        .collect();
    let shape = structure.shape();
    let flat: Vec<f64> = (0..shape.param_count()).map(|_| r.random_range(-0.8..0.8)).collect();
    (samples, CombinerParams::from_flat(shape, &flat).unwrap())
}

pub fn contrastive_point(seed: u64) -> ContrastiveBatch {
    let mut r = rng(1000 + seed);
    let n = r.random_range(2..7);
    let d = r.random_range(2..6);
    let mut table = || {
        let data: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        EmbeddingTable::new(n, d, data).unwrap()
    };
    let h = table();
    let t = table();
    ContrastiveBatch {
        h,
        t,
        tau: r.random_range(0.3..2.0),
    }
}

/// Relative error between the analytic combiner gradient and central
/// differences at `combiner_point(seed)`.
pub fn combiner_grad_error(seed: u64) -> f64 {
    use linkrr::pairwise::{loss_and_grad, mean_loss};
    let (samples, params) = combiner_point(seed);
    assert!(samples.iter().filter(|s| s.context.nodes.len() >= 2).count() >= 2);
    let (_, analytic) = loss_and_grad(&samples, &params);
    let numeric = numeric_grad(
        |p| mean_loss(&samples, &CombinerParams::from_flat(params.shape, p).unwrap()),
        &params.to_flat(),
        1e-5,
    );
    relative_error(&analytic, &numeric)
}

/// Relative errors of the contrastive gradients for `h` and `t`.
pub fn contrastive_grad_error(seed: u64) -> (f64, f64) {
    use linkrr::text_align::contrastive_loss;
    let batch = contrastive_point(seed);
    let out = contrastive_loss(&batch).unwrap();
    let (n, d) = (batch.h.rows(), batch.h.dim());
    let with = |h: &[f64], t: &[f64]| {
        let b = ContrastiveBatch {
            h: EmbeddingTable::new(n, d, h.to_vec()).unwrap(),
            t: EmbeddingTable::new(n, d, t.to_vec()).unwrap(),
            tau: batch.tau,
        };
        contrastive_loss(&b).unwrap().loss
    };
    let h = batch.h.as_slice();
    let t = batch.t.as_slice();
    let eh = relative_error(&out.grad_h, &numeric_grad(|x| with(x, t), h, 1e-5));
    let et = relative_error(&out.grad_t, &numeric_grad(|x| with(h, x), t, 1e-5));
    (eh, et)
}

/// Each row multiplied by a distinct positive factor.
pub fn scale_rows(table: &EmbeddingTable) -> EmbeddingTable {
    let d = table.dim();
    let data = table
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, x)| x * (1.0 + (i / d) as f64 * 2.5))
        .collect();
    EmbeddingTable::new(table.rows(), d, data).unwrap()
}

/// Planted fixture with a combiner trained on its train split.
pub struct Desk {
    pub full: TextAttributedGraph,
    pub split: linkrr::EdgeSplit,
    pub observed: std::sync::Arc<TextAttributedGraph>,
    pub index: linkrr::retrieval::Bm25Index,
    pub provider: linkrr::scorers::HeuristicProvider,
    pub losses: Vec<f64>,
}

impl Desk {
    pub fn new() -> Self {
        use linkrr::fixture::{planted_graph, PlantedConfig};
        use linkrr::pairwise::{train_combiner, StructureConfig, TrainConfig};
        let fx = planted_graph(&PlantedConfig::default()).unwrap();
        let observed = std::sync::Arc::new(fx.graph.with_edges(&fx.split.train).unwrap());
        let structure = StructureConfig::default();
        let trained = train_combiner(
            &observed,
            &fx.split.train,
            &structure,
            &TrainConfig::default(),
            linkrr::par::Execution::Parallel,
        )
        .unwrap();
        let index = linkrr::retrieval::Bm25Index::for_graph(&observed, &Default::default());
        let provider =
            linkrr::scorers::HeuristicProvider::new(observed.clone(), structure, trained.params).unwrap();
        Desk {
            full: fx.graph,
            split: fx.split,
            observed,
            index,
            provider,
            losses: trained.losses,
        }
    }

    pub fn run(
        &self,
        candidates: usize,
        retrieved: usize,
        num_pairs: usize,
        exec: linkrr::par::Execution,
    ) -> linkrr::eval::EvalReport {
        use linkrr::eval::{run_experiment, EvalProtocol, Pipeline};
        let pipeline = Pipeline {
            observed: &self.observed,
            index: &self.index,
            generator: &linkrr::retrieval::TemplateGenerator,
            provider: &self.provider,
            retrieval: Default::default(),
            rerank: Default::default(),
        };
        let protocol = EvalProtocol {
            candidates,
            retrieved,
            num_pairs,
            seed: 7,
            k: 10,
        };
        run_experiment(&self.full, &self.split, &protocol, &pipeline, exec).unwrap()
    }
}
