//! Retrieval-rerank link prediction over text-attributed graphs.
//!
//! The pipeline narrows a large candidate set with BM25 search over
//! generated neighbor queries, then reranks the survivors with a
//! pluggable scorer through the Yes/No index. Structural signals come
//! from personalized PageRank and pairwise encodings; the `microdecoder`
//! module counts attention work to check shared-prefix key/value reuse.

pub mod config;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod graph;
pub mod microdecoder;
pub mod pairwise;
pub mod par;
pub mod ppr;
pub mod rerank;
pub mod retrieval;
pub mod scorers;
pub mod text_align;

pub use error::{Error, Result};
pub use graph::{Edge, EdgeSplit, NodeId, TextAttributedGraph};

/// Deterministic RNG for `(seed, stream)`; independent streams for
/// independent consumers of one run seed.
pub fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
