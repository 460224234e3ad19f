//! Pairwise structural encodings and the trainable combiner that scores
//! node pairs from them.
//!
//! For a pair `(a, b)` each context node `u` gets an input vector
//! `x_u = [deg(u)/max_deg, ppr(a,u), ppr(b,u), rpe(a,b,u)...]`. A linear
//! scorer over `x_u` followed by a softmax over the context set gives the
//! weight `w_u`; the encoding of `u` is `h_u = M x_u`; the pair encoding is
//! `sum_u w_u * h_u`. A logistic head over the encoding and the classical
//! heuristics produces the edge score.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use fnv::{FnvHashMap, FnvHashSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Edge, NodeId, TextAttributedGraph};
use crate::par::{self, Execution};
use crate::ppr::{
    relative_positional_encoding, select_context_nodes_with, ContextThresholds, PprCache,
    PprConfig, PprScores, RpeConfig,
};

/// Observable per-node features: normalized degree and both PPR scores.
pub const NODE_FEATURE_DIM: usize = 3;
/// `[common_neighbors, adamic_adar, katz, ppr_ab, ppr_ba]`.
pub const HEURISTIC_DIM: usize = 5;

const PARAMS_FORMAT: &str = "linkrr-combiner";
const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PairwiseError {
    #[error("training diverged at epoch {epoch}; last finite loss {last_finite_loss}")]
    Diverged { epoch: usize, last_finite_loss: f64 },
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("could not sample {wanted} non-edges ({found} found)")]
    NegativeSampling { wanted: usize, found: usize },
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
    #[error("params file {path}: {msg}")]
    File { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairwiseConfig {
    /// Width of the pair encoding.
    pub dim: usize,
    pub katz_beta: f64,
    pub katz_horizon: usize,
}

impl Default for PairwiseConfig {
    fn default() -> Self {
        PairwiseConfig {
            dim: 16,
            katz_beta: 0.05,
            katz_horizon: 4,
        }
    }
}

impl PairwiseConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.dim == 0 {
            return Err("pairwise.dim must be positive".into());
        }
        if !(self.katz_beta > 0.0 && self.katz_beta.is_finite()) {
            return Err(format!(
                "pairwise.katz_beta must be positive, got {}",
                self.katz_beta
            ));
        }
        if self.katz_horizon == 0 {
            return Err("pairwise.katz_horizon must be at least 1".into());
        }
        Ok(())
    }
}

/// Classical link heuristics for one ordered pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeuristicFeatures {
    pub common_neighbors: usize,
    pub adamic_adar: f64,
    pub katz_truncated: f64,
    pub ppr_ab: f64,
    pub ppr_ba: f64,
}

impl HeuristicFeatures {
    pub fn to_array(&self) -> [f64; HEURISTIC_DIM] {
        [
            self.common_neighbors as f64,
            self.adamic_adar,
            self.katz_truncated,
            self.ppr_ab,
            self.ppr_ba,
        ]
    }
}

/// Sparse walk counts from `v`: entry `s` maps node to the number of walks
/// of length `s` ending there.
fn walk_counts(graph: &TextAttributedGraph, v: NodeId, steps: usize) -> Vec<FnvHashMap<NodeId, f64>> {
    let mut layers = Vec::with_capacity(steps + 1);
    let mut current = FnvHashMap::default();
    current.insert(v, 1.0);
    layers.push(current);
    for s in 0..steps {
        let mut next: FnvHashMap<NodeId, f64> = FnvHashMap::default();
        for (&u, &count) in &layers[s] {
            for &w in graph.neighbors(u) {
                *next.entry(w).or_insert(0.0) += count;
            }
        }
        layers.push(next);
    }
    layers
}

/// `sum_{l=1..horizon} beta^l * (A^l)[a][b]`, computed by meeting walks from
/// both endpoints in the middle.
pub fn katz_truncated(
    graph: &TextAttributedGraph,
    a: NodeId,
    b: NodeId,
    beta: f64,
    horizon: usize,
) -> f64 {
    let half = horizon.div_ceil(2);
    let from_a = walk_counts(graph, a, half);
    let from_b = walk_counts(graph, b, half);
    let mut total = 0.0;
    let mut weight = 1.0;
    for len in 1..=horizon {
        weight *= beta;
        let i = len.div_ceil(2);
        let (left, right) = (&from_a[i], &from_b[len - i]);
        let (small, big) = if left.len() <= right.len() {
            (left, right)
        } else {
            (right, left)
        };
        let walks: f64 = small
            .iter()
            .filter_map(|(u, c)| big.get(u).map(|d| c * d))
            .sum();
        total += weight * walks;
    }
    total
}

pub fn heuristic_features(
    graph: &TextAttributedGraph,
    a: NodeId,
    b: NodeId,
    ppr_a: &PprScores,
    ppr_b: &PprScores,
    config: &PairwiseConfig,
) -> HeuristicFeatures {
    let (na, nb) = (graph.neighbors(a), graph.neighbors(b));
    let (mut i, mut j) = (0, 0);
    let mut cn = 0;
    let mut aa = 0.0;
    while i < na.len() && j < nb.len() {
        match na[i].cmp(&nb[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let deg = graph.degree(na[i]);
                cn += 1;
                if deg >= 2 {
                    aa += 1.0 / (deg as f64).ln();
                }
                i += 1;
                j += 1;
            }
        }
    }
    HeuristicFeatures {
        common_neighbors: cn,
        adamic_adar: aa,
        katz_truncated: katz_truncated(graph, a, b, config.katz_beta, config.katz_horizon),
        ppr_ab: ppr_a.get(b),
        ppr_ba: ppr_b.get(a),
    }
}

/// Parameter-independent inputs for one pair: the context nodes, their
/// input vectors, and the heuristics.
#[derive(Clone, Debug)]
pub struct PairContext {
    pub a: NodeId,
    pub b: NodeId,
    pub nodes: Vec<NodeId>,
    pub inputs: Vec<Vec<f64>>,
    pub heuristics: HeuristicFeatures,
}

impl PairContext {
    fn heuristic_vec(&self) -> [f64; HEURISTIC_DIM] {
        self.heuristics.to_array()
    }
}

/// Everything needed to featurize pairs on one graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StructureConfig {
    pub ppr: PprConfig,
    pub thresholds: ContextThresholds,
    pub rpe: RpeConfig,
    pub pairwise: PairwiseConfig,
}

impl StructureConfig {
    pub fn input_dim(&self) -> usize {
        NODE_FEATURE_DIM + self.rpe.dim
    }

    pub fn shape(&self) -> CombinerShape {
        CombinerShape {
            input_dim: self.input_dim(),
            dim: self.pairwise.dim,
            heuristic_dim: HEURISTIC_DIM,
        }
    }
}

/// Builds [`PairContext`]s over a graph, memoizing PPR per node.
pub struct PairFeaturizer<'g> {
    graph: &'g TextAttributedGraph,
    cache: &'g PprCache,
    config: StructureConfig,
    max_degree: f64,
}

impl<'g> PairFeaturizer<'g> {
    /// `cache` must have been created with `config.ppr` and only ever used
    /// with `graph`.
    pub fn new(graph: &'g TextAttributedGraph, cache: &'g PprCache, config: StructureConfig) -> Self {
        PairFeaturizer {
            graph,
            cache,
            config,
            max_degree: graph.max_degree().max(1) as f64,
        }
    }

    pub fn graph(&self) -> &TextAttributedGraph {
        self.graph
    }

    pub fn context(&self, a: NodeId, b: NodeId) -> PairContext {
        let ppr_a = self.cache.get(self.graph, a);
        let ppr_b = self.cache.get(self.graph, b);
        let nodes =
            select_context_nodes_with(self.graph, a, b, &ppr_a, &ppr_b, &self.config.thresholds);
        let inputs = nodes
            .iter()
            .map(|&u| {
                let (p, q) = (ppr_a.get(u), ppr_b.get(u));
                let mut x = Vec::with_capacity(self.config.input_dim());
                x.push(self.graph.degree(u) as f64 / self.max_degree);
                x.push(p);
                x.push(q);
                x.extend(relative_positional_encoding(p, q, &self.config.rpe).0);
                x
            })
            .collect();
        PairContext {
            a,
            b,
            nodes,
            inputs,
            heuristics: heuristic_features(self.graph, a, b, &ppr_a, &ppr_b, &self.config.pairwise),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinerShape {
    pub input_dim: usize,
    pub dim: usize,
    pub heuristic_dim: usize,
}

impl CombinerShape {
    pub fn param_count(&self) -> usize {
        self.input_dim + self.dim * self.input_dim + self.dim + self.heuristic_dim + 1
    }
}

/// Combiner weights: linear attention scorer, mixing matrix (row-major,
/// `dim x input_dim`), and logistic head over `[encoding, heuristics]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinerParams {
    pub shape: CombinerShape,
    pub attention: Vec<f64>,
    pub mix: Vec<f64>,
    pub head: Vec<f64>,
    pub bias: f64,
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    params: CombinerParams,
}

impl CombinerParams {
    pub fn zeros(shape: CombinerShape) -> Self {
        CombinerParams {
            shape,
            attention: vec![0.0; shape.input_dim],
            mix: vec![0.0; shape.dim * shape.input_dim],
            head: vec![0.0; shape.dim + shape.heuristic_dim],
            bias: 0.0,
        }
    }

    /// Small seeded uniform init for the mixing matrix and head; zero
    /// attention (uniform weights) and bias.
    pub fn init(shape: CombinerShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(shape);
        for m in &mut p.mix {
            *m = rng.random_range(-0.5..0.5);
        }
        for h in &mut p.head {
            *h = rng.random_range(-0.1..0.1);
        }
        p
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.shape.param_count());
        v.extend(&self.attention);
        v.extend(&self.mix);
        v.extend(&self.head);
        v.push(self.bias);
        v
    }

    pub fn from_flat(shape: CombinerShape, flat: &[f64]) -> Result<Self, PairwiseError> {
        if flat.len() != shape.param_count() {
            return Err(PairwiseError::Shape(format!(
                "expected {} values, got {}",
                shape.param_count(),
                flat.len()
            )));
        }
        let (attention, rest) = flat.split_at(shape.input_dim);
        let (mix, rest) = rest.split_at(shape.dim * shape.input_dim);
        let (head, rest) = rest.split_at(shape.dim + shape.heuristic_dim);
        Ok(CombinerParams {
            shape,
            attention: attention.to_vec(),
            mix: mix.to_vec(),
            head: head.to_vec(),
            bias: rest[0],
        })
    }

    pub fn check(&self) -> Result<(), PairwiseError> {
        let s = self.shape;
        if s.heuristic_dim != HEURISTIC_DIM {
            return Err(PairwiseError::Shape(format!(
                "heuristic_dim must be {HEURISTIC_DIM}, got {}",
                s.heuristic_dim
            )));
        }
        if self.attention.len() != s.input_dim
            || self.mix.len() != s.dim * s.input_dim
            || self.head.len() != s.dim + s.heuristic_dim
        {
            return Err(PairwiseError::Shape("vector lengths disagree with header".into()));
        }
        if !self.to_flat().iter().all(|x| x.is_finite()) {
            return Err(PairwiseError::Shape("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), PairwiseError> {
        let file_err = |msg: String| PairwiseError::File {
            path: path.display().to_string(),
            msg,
        };
        let out = File::create(path).map_err(|e| file_err(e.to_string()))?;
        let file = ParamsFile {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_VERSION,
            params: self.clone(),
        };
        serde_json::to_writer_pretty(BufWriter::new(out), &file).map_err(|e| file_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PairwiseError> {
        let file_err = |msg: String| PairwiseError::File {
            path: path.display().to_string(),
            msg,
        };
        let input = File::open(path).map_err(|e| file_err(e.to_string()))?;
        let file: ParamsFile =
            serde_json::from_reader(BufReader::new(input)).map_err(|e| file_err(e.to_string()))?;
        if file.format != PARAMS_FORMAT || file.version != PARAMS_VERSION {
            return Err(file_err(format!(
                "expected {PARAMS_FORMAT} v{PARAMS_VERSION}, found {} v{}",
                file.format, file.version
            )));
        }
        file.params.check()?;
        Ok(file.params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Contribution {
    pub node: NodeId,
    pub weight: f64,
    pub encoding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseEncoding {
    pub vector: Vec<f64>,
    pub contributions: Vec<Contribution>,
    /// Set when the context set was empty and the vector is all zeros.
    pub empty_context: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    m.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn pairwise_encoding(ctx: &PairContext, params: &CombinerParams) -> PairwiseEncoding {
    let dim = params.shape.dim;
    if ctx.nodes.is_empty() {
        return PairwiseEncoding {
            vector: vec![0.0; dim],
            contributions: Vec::new(),
            empty_context: true,
        };
    }
    let scores: Vec<f64> = ctx.inputs.iter().map(|x| dot(&params.attention, x)).collect();
    let weights = softmax(&scores);
    let mut vector = vec![0.0; dim];
    let mut contributions = Vec::with_capacity(ctx.nodes.len());
    for ((&node, x), &w) in ctx.nodes.iter().zip(&ctx.inputs).zip(&weights) {
        let h = mat_vec(&params.mix, params.shape.input_dim, x);
        for (acc, hv) in vector.iter_mut().zip(&h) {
            *acc += w * hv;
        }
        contributions.push(Contribution {
            node,
            weight: w,
            encoding: h,
        });
    }
    PairwiseEncoding {
        vector,
        contributions,
        empty_context: false,
    }
}

/// Pre-activation edge score: `head . [encoding, heuristics] + bias`.
pub fn score(ctx: &PairContext, params: &CombinerParams) -> f64 {
    let enc = pairwise_encoding(ctx, params);
    let dim = params.shape.dim;
    dot(&params.head[..dim], &enc.vector) + dot(&params.head[dim..], &ctx.heuristic_vec()) + params.bias
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub context: PairContext,
    pub label: bool,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over `samples` and its gradient, flattened in
/// [`CombinerParams::to_flat`] order.
pub fn loss_and_grad(samples: &[Sample], params: &CombinerParams) -> (f64, Vec<f64>) {
    let s = params.shape;
    let mut g_att = vec![0.0; s.input_dim];
    let mut g_mix = vec![0.0; s.dim * s.input_dim];
    let mut g_head = vec![0.0; s.dim + s.heuristic_dim];
    let mut g_bias = 0.0;
    let mut loss = 0.0;
    let (head_enc, head_heur) = params.head.split_at(s.dim);
    for sample in samples {
        let ctx = &sample.context;
        let enc = pairwise_encoding(ctx, params);
        let heur = ctx.heuristic_vec();
        let z = dot(head_enc, &enc.vector) + dot(head_heur, &heur) + params.bias;
        let y = if sample.label { 1.0 } else { 0.0 };
        loss += softplus(z) - y * z;
        let dz = sigmoid(z) - y;
        for (g, f) in g_head.iter_mut().zip(enc.vector.iter().chain(heur.iter())) {
            *g += dz * f;
        }
        g_bias += dz;
        if enc.empty_context {
            continue;
        }
        // upstream gradient on the encoding vector
        let delta: Vec<f64> = head_enc.iter().map(|h| dz * h).collect();
        let c: Vec<f64> = enc
            .contributions
            .iter()
            .map(|cb| dot(&delta, &cb.encoding))
            .collect();
        let c_bar: f64 = enc.contributions.iter().zip(&c).map(|(cb, ci)| cb.weight * ci).sum();
        for ((cb, ci), x) in enc.contributions.iter().zip(&c).zip(&ctx.inputs) {
            let ds = cb.weight * (ci - c_bar);
            for (g, xi) in g_att.iter_mut().zip(x) {
                *g += ds * xi;
            }
            for (row, d) in g_mix.chunks_exact_mut(s.input_dim).zip(&delta) {
                let wd = cb.weight * d;
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += wd * xi;
                }
            }
        }
    }
    let n = samples.len().max(1) as f64;
    let mut grad = Vec::with_capacity(s.param_count());
    grad.extend(g_att);
    grad.extend(g_mix);
    grad.extend(g_head);
    grad.push(g_bias);
    for g in &mut grad {
        *g /= n;
    }
    (loss / n, grad)
}

pub fn mean_loss(samples: &[Sample], params: &CombinerParams) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|smp| {
            let z = score(&smp.context, params);
            softplus(z) - if smp.label { z } else { 0.0 }
        })
        .sum();
    total / samples.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Initial step size tried every epoch; halved until the loss does not
    /// increase.
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of train edges held out as supervision targets. Their
    /// features are computed on the graph with those edges removed.
    pub supervision_fraction: f64,
    /// Cap on positive samples.
    pub max_positives: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.5,
            epochs: 150,
            seed: 0,
            supervision_fraction: 0.2,
            max_positives: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("pairwise.train.lr must be positive, got {}", self.lr));
        }
        if !(self.supervision_fraction > 0.0 && self.supervision_fraction < 1.0) {
            return Err(format!(
                "pairwise.train.supervision_fraction must be in (0, 1), got {}",
                self.supervision_fraction
            ));
        }
        if self.max_positives == 0 {
            return Err("pairwise.train.max_positives must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedCombiner {
    pub params: CombinerParams,
    /// Full-batch loss before each epoch's update, plus the final loss.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on `samples` from `init`.
///
/// Each epoch starts at `config.lr` and halves the step until the loss does
/// not increase, so the recorded losses are non-increasing.
pub fn fit(
    samples: &[Sample],
    init: CombinerParams,
    config: &TrainConfig,
) -> Result<TrainedCombiner, PairwiseError> {
    let mut params = init;
    let mut losses = Vec::with_capacity(config.epochs + 1);
    let mut last_finite = f64::NAN;
    for epoch in 0..config.epochs {
        let (loss, grad) = loss_and_grad(samples, &params);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(PairwiseError::Diverged {
                epoch,
                last_finite_loss: last_finite,
            });
        }
        last_finite = loss;
        losses.push(loss);
        let flat = params.to_flat();
        let mut step = config.lr;
        for _ in 0..40 {
            let trial: Vec<f64> = flat.iter().zip(&grad).map(|(p, g)| p - step * g).collect();
            let candidate = CombinerParams::from_flat(params.shape, &trial)?;
            let trial_loss = mean_loss(samples, &candidate);
            if trial_loss.is_finite() && trial_loss <= loss {
                params = candidate;
                break;
            }
            step *= 0.5;
        }
    }
    let final_loss = mean_loss(samples, &params);
    if !final_loss.is_finite() {
        return Err(PairwiseError::Diverged {
            epoch: config.epochs,
            last_finite_loss: last_finite,
        });
    }
    losses.push(final_loss);
    Ok(TrainedCombiner { params, losses })
}

/// Supervised pairs for combiner training: held-out train edges as
/// positives and an equal number of uniform non-edges as negatives, both
/// featurized on the graph without the held-out edges.
pub fn training_samples(
    graph: &TextAttributedGraph,
    train_edges: &[Edge],
    structure: &StructureConfig,
    config: &TrainConfig,
    exec: Execution,
) -> Result<Vec<Sample>, PairwiseError> {
    if train_edges.is_empty() {
        return Err(PairwiseError::EmptyTrainSplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut shuffled = train_edges.to_vec();
    shuffled.sort_unstable();
    shuffled.shuffle(&mut rng);
    let n_sup = ((train_edges.len() as f64 * config.supervision_fraction).floor() as usize)
        .clamp(1, config.max_positives);
    let supervision = &shuffled[..n_sup];
    let message: Vec<Edge> = shuffled[n_sup..].to_vec();
    let message_graph = graph
        .with_edges(&message)
        .map_err(|e| PairwiseError::Shape(e.to_string()))?;

    let known: FnvHashSet<Edge> = train_edges.iter().copied().collect();
    let n = graph.node_count();
    let mut negatives = FnvHashSet::default();
    let mut attempts = 0usize;
    while negatives.len() < n_sup && attempts < 1000 * n_sup + 1000 {
        attempts += 1;
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v {
            continue;
        }
        let e = Edge::new(u, v);
        if !known.contains(&e) {
            negatives.insert(e);
        }
    }
    if negatives.len() < n_sup {
        return Err(PairwiseError::NegativeSampling {
            wanted: n_sup,
            found: negatives.len(),
        });
    }
    let mut negatives: Vec<Edge> = negatives.into_iter().collect();
    negatives.sort_unstable();

    let labeled: Vec<(Edge, bool)> = supervision
        .iter()
        .map(|&e| (e, true))
        .chain(negatives.into_iter().map(|e| (e, false)))
        .collect();
    let cache = PprCache::new(structure.ppr);
    let featurizer = PairFeaturizer::new(&message_graph, &cache, *structure);
    Ok(par::map(exec, &labeled, |&(Edge(a, b), label)| Sample {
        context: featurizer.context(a, b),
        label,
    }))
}

/// Train a combiner on the train edges of `graph`.
pub fn train_combiner(
    graph: &TextAttributedGraph,
    train_edges: &[Edge],
    structure: &StructureConfig,
    config: &TrainConfig,
    exec: Execution,
) -> Result<TrainedCombiner, PairwiseError> {
    let samples = training_samples(graph, train_edges, structure, config, exec)?;
    let init = CombinerParams::init(structure.shape(), config.seed);
    fit(&samples, init, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppr::personalized_pagerank;

    fn graph(n: usize, edges: &[(usize, usize)]) -> TextAttributedGraph {
        let nodes = (0..n).map(|i| (i.to_string(), String::new())).collect();
        TextAttributedGraph::from_parts(nodes, edges.iter().copied())
            .unwrap()
            .0
    }

    fn heur(g: &TextAttributedGraph, a: usize, b: usize) -> HeuristicFeatures {
        let cfg = PprConfig::default();
        let pa = personalized_pagerank(g, a, &cfg);
        let pb = personalized_pagerank(g, b, &cfg);
        heuristic_features(g, a, b, &pa, &pb, &PairwiseConfig::default())
    }

    #[test]
    fn triangle_common_neighbor() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let h = heur(&g, 0, 1);
        assert_eq!(h.common_neighbors, 1);
        assert!((h.adamic_adar - 1.0 / 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn disconnected_pair_heuristics_vanish() {
        let g = graph(4, &[(0, 1), (2, 3)]);
        let h = heur(&g, 0, 2);
        assert_eq!(h.common_neighbors, 0);
        assert_eq!(h.adamic_adar, 0.0);
        assert_eq!(h.katz_truncated, 0.0);
        // joined by a length-3 path: no common neighbor, but Katz sees the path
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let h = heur(&g, 0, 3);
        assert_eq!(h.common_neighbors, 0);
        assert!(h.katz_truncated > 0.0);
    }

    fn single_context() -> PairContext {
        PairContext {
            a: 0,
            b: 1,
            nodes: vec![2],
            inputs: vec![vec![1.0, 0.2, 0.3, 0.2, 0.3, 0.5, 0.06, 0.1, 0.2]],
            heuristics: HeuristicFeatures {
                common_neighbors: 1,
                adamic_adar: 1.0,
                katz_truncated: 0.1,
                ppr_ab: 0.1,
                ppr_ba: 0.1,
            },
        }
    }

    fn shape() -> CombinerShape {
        StructureConfig::default().shape()
    }

    #[test]
    fn singleton_context_gets_full_weight() {
        let params = CombinerParams::init(shape(), 3);
        let ctx = single_context();
        let enc = pairwise_encoding(&ctx, &params);
        assert_eq!(enc.contributions[0].weight, 1.0);
        assert_eq!(enc.vector, enc.contributions[0].encoding);
    }

    #[test]
    fn zero_mix_gives_zero_vector() {
        let mut params = CombinerParams::init(shape(), 3);
        params.mix.iter_mut().for_each(|m| *m = 0.0);
        params.attention = vec![0.7; params.shape.input_dim];
        let enc = pairwise_encoding(&single_context(), &params);
        assert!(enc.vector.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_context_is_flagged() {
        let mut ctx = single_context();
        ctx.nodes.clear();
        ctx.inputs.clear();
        let enc = pairwise_encoding(&ctx, &CombinerParams::init(shape(), 1));
        assert!(enc.empty_context);
        assert_eq!(enc.vector, vec![0.0; 16]);
    }

    #[test]
    fn triangle_identity_mix_returns_node_two_inputs() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let structure = StructureConfig {
            thresholds: ContextThresholds {
                eta_near: 1e-6,
                eta_far: 1.0,
            },
            pairwise: PairwiseConfig {
                dim: 9,
                ..PairwiseConfig::default()
            },
            ..StructureConfig::default()
        };
        let cache = PprCache::new(structure.ppr);
        let feat = PairFeaturizer::new(&g, &cache, structure);
        let ctx = feat.context(0, 1);
        assert_eq!(ctx.nodes, vec![2]);
        let mut params = CombinerParams::zeros(structure.shape());
        for i in 0..9 {
            params.mix[i * 9 + i] = 1.0;
        }
        let enc = pairwise_encoding(&ctx, &params);
        // hand evaluation: degree feature 2/2, PPR of node 2 from 0 and 1, then the map
        let pa = personalized_pagerank(&g, 0, &structure.ppr).get(2);
        let pb = personalized_pagerank(&g, 1, &structure.ppr).get(2);
        let want = [1.0, pa, pb, pa, pb, pa + pb, pa * pb, pa.ln_1p(), pb.ln_1p()];
        for (got, w) in enc.vector.iter().zip(want) {
            assert!((got - w).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let g = graph(6, &[(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 4), (3, 5), (1, 5)]);
        let structure = StructureConfig::default();
        let cache = PprCache::new(structure.ppr);
        let ctx = PairFeaturizer::new(&g, &cache, structure).context(0, 1);
        assert!(ctx.nodes.len() >= 2);
        let params = CombinerParams::init(structure.shape(), 9);
        let mut params2 = params.clone();
        params2.attention = (0..params.shape.input_dim).map(|i| i as f64 * 0.3 - 1.0).collect();
        let enc = pairwise_encoding(&ctx, &params2);
        let total: f64 = enc.contributions.iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_init_balanced_step_keeps_bias_at_zero() {
        let mut pos = single_context();
        pos.heuristics.common_neighbors = 2;
        let neg = single_context();
        let samples = vec![
            Sample { context: pos.clone(), label: true },
            Sample { context: neg.clone(), label: false },
            Sample { context: neg, label: true },
            Sample { context: pos, label: false },
        ];
        let (_, grad) = loss_and_grad(&samples, &CombinerParams::zeros(shape()));
        assert_eq!(*grad.last().unwrap(), 0.0);
    }

    #[test]
    fn params_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = CombinerParams::init(shape(), 5);
        p.save(&path).unwrap();
        assert_eq!(CombinerParams::load(&path).unwrap(), p);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"format\": \"linkrr-combiner\""));
        assert!(text.contains("\"input_dim\": 9"));
    }

    #[test]
    fn divergence_reports_last_finite_loss() {
        let mut ctx = single_context();
        ctx.heuristics.adamic_adar = f64::NAN;
        let samples = vec![Sample { context: ctx, label: true }];
        let err = fit(&samples, CombinerParams::init(shape(), 1), &TrainConfig::default());
        assert!(matches!(err, Err(PairwiseError::Diverged { epoch: 0, .. })));
    }
}
