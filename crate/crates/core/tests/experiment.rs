mod common;

use common::*;
use linkrr::eval::random_baseline_mrr;
use linkrr::par::Execution;
use linkrr::rerank::Rank;
use linkrr::retrieval::{retrieve_candidates, Bm25Index, Provenance, QuerySet, Diversity, CandidateSet};
use std::sync::OnceLock;

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(Desk::new)
}

#[test]
fn combiner_training_decreases_loss() {
    let losses = &desk().losses;
    assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    assert!(losses.last().unwrap() < &(0.8 * losses[0]));
}

#[test]
fn heuristic_ranking_beats_random() {
    let report = desk().run(150, 0, 200, Execution::Parallel);
    assert_eq!(report.pairs.len(), 200);
    assert!(report.metrics.mrr > 3.0 * random_baseline_mrr(150), "{:?}", report.metrics);
    assert!(report.metrics.hits_at_1 <= report.metrics.mrr);
    assert!(report.metrics.hits_at_1 <= report.metrics.hits_at_k);
    assert!(report.timing.per_pair_secs.iter().all(|&t| t > 0.0));
    assert!(report.pairs.iter().all(|p| p.reranked == 150 && p.provider_calls == 150));
}

#[test]
fn retrieval_of_everything_changes_nothing() {
    let plain = desk().run(60, 0, 40, Execution::Parallel);
    let full = desk().run(60, 60, 40, Execution::Parallel);
    assert_eq!(plain.metrics, full.metrics);
    let ranks = |r: &linkrr::eval::EvalReport| r.pairs.iter().map(|p| p.rank).collect::<Vec<_>>();
    assert_eq!(ranks(&plain), ranks(&full));
}

#[test]
fn retrieval_never_worsens_a_retained_positive() {
    let without = desk().run(300, 0, 120, Execution::Parallel);
    let with = desk().run(300, 30, 120, Execution::Parallel);
    for (a, b) in without.pairs.iter().zip(&with.pairs) {
        assert_eq!((a.source, a.positive), (b.source, b.positive));
        assert_eq!(b.reranked, 30);
        if b.positive_retained {
            assert!(b.rank <= a.rank, "pair {}: {:?} vs {:?}", a.pair_id, b.rank, a.rank);
        } else {
            assert_eq!(b.rank, Rank::Infinite);
        }
    }
}

#[test]
fn reports_reproducible_across_execution_modes() {
    let a = desk().run(100, 20, 50, Execution::Parallel);
    let b = desk().run(100, 20, 50, Execution::Parallel);
    let c = desk().run(100, 20, 50, Execution::Sequential);
    let ja = a.deterministic_json().unwrap();
    assert_eq!(ja, b.deterministic_json().unwrap());
    assert_eq!(ja, c.deterministic_json().unwrap());
    assert!(!ja.contains("timing"));
}

fn template_queries(text: &str) -> QuerySet {
    QuerySet::from_groups(vec![vec![text.to_string(); 3]; 5], Diversity::Template, 0)
}

#[test]
fn near_far_split_on_fixture() {
    let d = desk();
    let g = &d.observed;
    let source = (0..g.node_count())
        .find(|&v| g.k_hop_neighbors(v, 2).len() >= 25)
        .expect("a source with a large 2-hop ring");
    let ring = g.k_hop_neighbors(source, 2);
    let mut pool: Vec<usize> = ring.clone();
    pool.extend((0..g.node_count()).filter(|u| *u != source && !ring.contains(u)).take(40));
    pool.sort_unstable();
    let set = CandidateSet {
        source,
        provenance: vec![Provenance::Sampled; pool.len()],
        positive: ring[0],
        candidates: pool,
    };
    let q = template_queries(g.text(source));
    let out = retrieve_candidates(g, &d.index, source, &q, &set, 30, 0.65, Execution::Parallel).unwrap();
    let near = out.provenance.iter().filter(|p| **p == Provenance::Near).count();
    assert_eq!((near, out.len() - near), (19, 11));
    out.check().unwrap();
}

#[test]
fn empty_ring_backfills_from_far() {
    let g = graph_from(40, &[(1, 2), (2, 3)]);
    let index = Bm25Index::for_graph(&g, &Default::default());
    let set = CandidateSet {
        source: 0,
        candidates: (1..40).collect(),
        positive: 5,
        provenance: vec![Provenance::Sampled; 39],
    };
    let out = retrieve_candidates(&g, &index, 0, &template_queries("text 0"), &set, 30, 0.65, Execution::Sequential)
        .unwrap();
    assert_eq!(out.len(), 30);
    assert!(out.provenance.iter().all(|p| *p == Provenance::Far));
}
