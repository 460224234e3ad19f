#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use linkrr::eval::compute_metrics;
use linkrr::graph::split_edges;
use linkrr::pairwise::{heuristic_features, katz_truncated, PairwiseConfig};
use linkrr::ppr::{personalized_pagerank, PprConfig};
use linkrr::rerank::{yes_no_index, RankedList};
use linkrr::retrieval::{bm25_topk, Bm25Index};
use linkrr::Edge;
use proptest::prelude::*;
use rand::Rng;

const MAGMA: [&str; 5] = [
    "Magma eruption dynamics in basaltic volcanoes",
    "Eruption forecasting from seismic swarms",
    "Granite formation and slow magma cooling",
    "Sediment transport in braided rivers",
    "Magma magma chamber pressure before an eruption",
];

#[test]
fn bm25_matches_naive_formula() {
    let index = Bm25Index::build(&MAGMA, 1.2, 0.75);
    for query in ["magma eruption", "eruption", "magma magma", "river sediment", "absent"] {
        for doc in 0..MAGMA.len() {
            let got = index.score(query, doc);
            let want = naive_bm25(&MAGMA, query, doc, 1.2, 0.75);
            assert!((got - want).abs() < 1e-12, "{query} / {doc}: {got} vs {want}");
        }
    }
    let top = bm25_topk(&index, "magma eruption", &[0, 1, 2, 3, 4], 10);
    assert_eq!(top.len(), 4);
    assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
    assert!(top.iter().all(|&(d, _)| d != 3));
}

#[test]
fn rank_list_ties_and_failures() {
    let list = RankedList::from_scores(0, 5, vec![(3, Some(0.9)), (5, Some(0.9)), (4, Some(0.1)), (7, None)], vec![], 4);
    assert_eq!(list.ordering, vec![3, 5, 4, 7]);
    assert_eq!(list.rank_of_positive, linkrr::rerank::Rank::Finite(2));
    assert_eq!(list.optimistic_rank(), linkrr::rerank::Rank::Finite(1));
}

fn arb_graph(max_n: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2..=max_n).prop_flat_map(|n| {
        let pairs = prop::collection::vec((0..n, 0..n), 0..(n * 3));
        (Just(n), pairs)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ppr_matches_power_iteration((n, edges) in arb_graph(12), s_pick in 0usize..12, alpha in 0.05f64..0.5) {
        let g = graph_from(n, &edges);
        let s = s_pick % n;
        let cfg = PprConfig { alpha, epsilon: 1e-11 };
        let got = personalized_pagerank(&g, s, &cfg);
        let want = dense_ppr(&g, s, alpha);
        for v in 0..n {
            prop_assert!((got.get(v) - want[v]).abs() < 1e-7, "node {}: {} vs {}", v, got.get(v), want[v]);
        }
        prop_assert!(got.total_mass() <= 1.0 + 1e-12);
    }

    #[test]
    fn ppr_residual_bound_holds_at_default_epsilon((n, edges) in arb_graph(12), s_pick in 0usize..12) {
        let g = graph_from(n, &edges);
        let s = s_pick % n;
        let cfg = PprConfig::default();
        let got = personalized_pagerank(&g, s, &cfg);
        let want = dense_ppr(&g, s, cfg.alpha);
        // the estimate never overshoots and misses at most the leftover residual
        let missing: f64 = (0..n).map(|v| want[v] - got.get(v)).sum();
        for v in 0..n {
            prop_assert!(got.get(v) <= want[v] + 1e-12);
        }
        prop_assert!(missing <= cfg.epsilon * 2.0 * g.edge_count() as f64 + 1e-12);
    }

    #[test]
    fn heuristics_match_brute_force((n, edges) in arb_graph(10)) {
        let g = graph_from(n, &edges);
        let cfg = PairwiseConfig::default();
        let katz = matrix_katz(&g, cfg.katz_beta, cfg.katz_horizon);
        let ppr = PprConfig::default();
        for a in 0..n {
            for b in 0..n {
                if a == b { continue; }
                let pa = personalized_pagerank(&g, a, &ppr);
                let pb = personalized_pagerank(&g, b, &ppr);
                let h = heuristic_features(&g, a, b, &pa, &pb, &cfg);
                prop_assert_eq!(h.common_neighbors, brute_common_neighbors(&g, a, b));
                prop_assert!((h.adamic_adar - brute_adamic_adar(&g, a, b)).abs() < 1e-12);
                prop_assert!((h.katz_truncated - katz[a][b]).abs() < 1e-9);
                let swapped = heuristic_features(&g, b, a, &pb, &pa, &cfg);
                prop_assert_eq!(swapped.common_neighbors, h.common_neighbors);
                prop_assert_eq!(swapped.ppr_ab, h.ppr_ba);
            }
        }
    }

    #[test]
    fn katz_any_horizon((n, edges) in arb_graph(8), horizon in 1usize..7, beta in 0.01f64..0.3) {
        let g = graph_from(n, &edges);
        let katz = matrix_katz(&g, beta, horizon);
        for a in 0..n {
            for b in 0..n {
                let got = katz_truncated(&g, a, b, beta, horizon);
                prop_assert!((got - katz[a][b]).abs() <= 1e-9 * katz[a][b].abs().max(1.0));
            }
        }
    }

    #[test]
    fn k_hop_matches_bfs_layers((n, edges) in arb_graph(14), v_pick in 0usize..14) {
        let g = graph_from(n, &edges);
        let v = v_pick % n;
        let layers = bfs_layers(&g, v);
        for (k, layer) in layers.iter().enumerate().skip(1) {
            prop_assert_eq!(&g.k_hop_neighbors(v, k), layer);
        }
        prop_assert!(g.k_hop_neighbors(v, layers.len()).is_empty());
        let mut union: Vec<usize> = layers.iter().skip(1).flatten().copied().collect();
        union.sort_unstable();
        let mut component: Vec<usize> = (0..n).filter(|&u| u != v && layers.iter().any(|l| l.contains(&u))).collect();
        component.sort_unstable();
        prop_assert_eq!(union, component);
    }

    #[test]
    fn yes_no_index_properties(y in -50.0f64..50.0, n in -50.0f64..50.0, shift in -100.0f64..100.0) {
        let base = yes_no_index(y, n);
        prop_assert!((0.0..=1.0).contains(&base));
        prop_assert!((yes_no_index(y + shift, n + shift) - base).abs() < 1e-12);
        prop_assert!(yes_no_index(y + 0.5, n) >= base);
        prop_assert!((yes_no_index(n, y) - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_brute_force(ranks in prop::collection::vec(prop::option::of(1usize..200), 1..60), k in 1usize..20) {
        let typed: Vec<_> = ranks.iter().map(|&r| to_rank(r)).collect();
        let m = compute_metrics(&typed, k).unwrap();
        let (mrr, h1, hk) = brute_metrics(&ranks, k);
        prop_assert!((m.mrr - mrr).abs() < 1e-12);
        prop_assert_eq!(m.hits_at_1, h1);
        prop_assert_eq!(m.hits_at_k, hk);
        prop_assert!(m.hits_at_1 <= m.mrr + 1e-15 && m.mrr <= 1.0);
        prop_assert!(m.hits_at_1 <= m.hits_at_k);
    }
}

#[test]
fn split_partitions_edges_for_many_seeds() {
    let mut r = rng(3);
    let g = random_graph(&mut r, 40, 0.15);
    let m = g.edge_count();
    for seed in 0..1000 {
        let s = split_edges(&g, (0.8, 0.1, 0.1), seed).unwrap();
        s.validate(&g).unwrap();
        assert_eq!(s.valid.len(), (0.1 * m as f64 + 1e-9).floor() as usize);
        assert_eq!(s.test.len(), s.valid.len());
        assert_eq!(s.train.len() + s.valid.len() + s.test.len(), m);
    }
    let a = split_edges(&g, (0.8, 0.1, 0.1), 5).unwrap();
    let b = split_edges(&g, (0.8, 0.1, 0.1), 5).unwrap();
    assert_eq!(a, b);
    assert!(a.test.iter().all(|e: &Edge| e.0 < e.1));
}

#[test]
fn random_graph_ppr_sums_below_one() {
    let mut r = rng(11);
    for _ in 0..20 {
        let n = r.random_range(3..30);
        let g = random_graph(&mut r, n, 0.2);
        let s = r.random_range(0..n);
        let p = personalized_pagerank(&g, s, &PprConfig::default());
        assert!(p.total_mass() <= 1.0 + 1e-12);
        assert!(p.entries().iter().all(|&(_, v)| v >= 0.0));
    }
}
