//! Seeded planted-community graphs for tests, benches and demos.
//!
//! Nodes belong to communities with their own topic vocabulary. Test edges
//! close triangles: each joins two nodes at distance 2 in the training
//! graph, so structure and text both carry signal about them.

use fnv::FnvHashSet;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Edge, EdgeSplit, GraphError, TextAttributedGraph};
use crate::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedConfig {
    pub communities: usize,
    pub community_size: usize,
    /// Expected intra-community degree.
    pub intra_degree: f64,
    /// Expected inter-community degree.
    pub inter_degree: f64,
    pub topic_words: usize,
    pub background_words: usize,
    pub words_per_node: usize,
    /// Fraction of a node's words drawn from its own topic.
    pub topic_fraction: f64,
    pub valid_edges: usize,
    pub test_edges: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            communities: 10,
            community_size: 50,
            intra_degree: 5.0,
            inter_degree: 0.5,
            topic_words: 12,
            background_words: 60,
            words_per_node: 10,
            topic_fraction: 0.5,
            valid_edges: 40,
            test_edges: 250,
            seed: 7,
        }
    }
}

pub struct PlantedFixture {
    pub graph: TextAttributedGraph,
    pub split: EdgeSplit,
    pub community: Vec<usize>,
}

const FIXTURE_STREAM: u64 = 0xf1 << 48;

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "nu", "ra", "se", "ti", "vo", "ba", "de", "fu", "go", "he", "ji", "pa", "zu",
];

fn word(id: usize) -> String {
    let mut s = String::new();
    let mut x = id + 17;
    for _ in 0..3 {
        s.push_str(SYLLABLES[x % SYLLABLES.len()]);
        x /= SYLLABLES.len();
    }
    s.push_str(&id.to_string());
    s
}

pub fn planted_graph(config: &PlantedConfig) -> Result<PlantedFixture, GraphError> {
    let mut rng = seeded_rng(config.seed, FIXTURE_STREAM);
    let n = config.communities * config.community_size;
    let community: Vec<usize> = (0..n).map(|v| v / config.community_size).collect();

    let background: Vec<String> = (0..config.background_words).map(word).collect();
    let topics: Vec<Vec<String>> = (0..config.communities)
        .map(|c| {
            (0..config.topic_words)
                .map(|i| word(config.background_words + c * config.topic_words + i))
                .collect()
        })
        .collect();
    let nodes: Vec<(String, String)> = (0..n)
        .map(|v| {
            let words: Vec<&str> = (0..config.words_per_node)
                .map(|_| {
                    let pool = if rng.random::<f64>() < config.topic_fraction {
                        &topics[community[v]]
                    } else {
                        &background
                    };
                    pool.choose(&mut rng).expect("non-empty vocabulary").as_str()
                })
                .collect();
            (format!("p{v}"), words.join(" "))
        })
        .collect();

    let p_in = config.intra_degree / (config.community_size.max(2) - 1) as f64;
    let p_out = config.inter_degree / (n - config.community_size).max(1) as f64;
    let mut base = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if community[u] == community[v] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                base.push(Edge(u, v));
            }
        }
    }
    base.shuffle(&mut rng);
    let n_valid = config.valid_edges.min(base.len() / 10);
    let mut valid = base[..n_valid].to_vec();
    let mut train = base[n_valid..].to_vec();
    let plain: Vec<(String, String)> = nodes.iter().map(|(id, _)| (id.clone(), String::new())).collect();
    let (train_graph, _) = TextAttributedGraph::from_parts(plain, train.iter().map(|e| (e.0, e.1)))?;

    let known: FnvHashSet<Edge> = base.iter().copied().collect();
    let mut test = FnvHashSet::default();
    let mut attempts = 0;
    while test.len() < config.test_edges && attempts < 1000 * config.test_edges {
        attempts += 1;
        let mid = rng.random_range(0..n);
        let nbrs = train_graph.neighbors(mid);
        if nbrs.len() < 2 {
            continue;
        }
        let pair: Vec<_> = nbrs.choose_multiple(&mut rng, 2).copied().collect();
        let e = Edge::new(pair[0], pair[1]);
        if community[e.0] == community[e.1] && !known.contains(&e) {
            test.insert(e);
        }
    }
    let mut test: Vec<Edge> = test.into_iter().collect();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    let all = train.iter().chain(&valid).chain(&test).map(|e| (e.0, e.1));
    let (graph, _) = TextAttributedGraph::from_parts(nodes, all)?;
    let split = EdgeSplit {
        train,
        valid,
        test,
        seed: config.seed,
    };
    split.validate(&graph)?;
    Ok(PlantedFixture {
        graph,
        split,
        community,
    })
}
