mod common;

use std::collections::{BTreeMap, BTreeSet};

use alure::eval::{format_percent, neighbor_purity, normalized_entropy, relative_metric_change, retrieval_recall};
use alure::graph::SimilarityGraph;
use common::{criteria, oracles};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn lift_and_base_rate_fixtures() {
    let outcome = criteria::metric_fixtures();
    println!("{}", outcome.detail);
    outcome.assert();
    assert_eq!(relative_metric_change(42.0, 42.0).unwrap(), 0.0);
    assert!(relative_metric_change(1.0, 0.0).is_err());
}

#[test]
fn twenty_example_fixture_matches_hand_computation() {
    let p = [
        0.91, 0.12, 0.33, 0.78, 0.05, 0.64, 0.27, 0.49, 0.83, 0.15, 0.58, 0.71, 0.09, 0.36, 0.95, 0.22, 0.44, 0.67,
        0.18, 0.52,
    ];
    let y = [
        true, false, false, true, false, true, false, true, true, false, false, true, false, false, true, false,
        true, true, false, false,
    ];
    let got = normalized_entropy(&p, &y).unwrap();
    let want = oracles::normalized_entropy(&p, &y);
    assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    assert!(got < 1.0);
}

#[test]
fn ne_limits_and_errors() {
    let y = [true, false, true, false];
    let near_perfect = [1.0 - 1e-9, 1e-9, 1.0 - 1e-9, 1e-9];
    assert!(normalized_entropy(&near_perfect, &y).unwrap() < 1e-6);
    assert!(normalized_entropy(&[0.5, 0.5], &[true, true]).is_err());
    assert!(normalized_entropy(&[0.5], &[true, false]).is_err());
}

#[test]
fn ne_ignores_example_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pairs: Vec<(f64, bool)> = (0..200).map(|_| (rng.random_range(0.01..0.99), rng.random_bool(0.3))).collect();
    let split = |v: &[(f64, bool)]| -> (Vec<f64>, Vec<bool>) { v.iter().copied().unzip() };
    let (p, y) = split(&pairs);
    let base = normalized_entropy(&p, &y).unwrap();
    for _ in 0..10 {
        pairs.shuffle(&mut rng);
        let (p, y) = split(&pairs);
        assert!((normalized_entropy(&p, &y).unwrap() - base).abs() < 1e-12);
    }
}

#[test]
fn random_graph_purity_is_near_one_over_clusters() {
    let c = 5;
    let mut total = 0.0;
    let seeds = 10;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1_000u64;
        let labels: BTreeMap<u64, usize> = (0..n).map(|u| (u, (u % c as u64) as usize)).collect();
        let edges = (0..n)
            .map(|u| {
                let list = (0..10)
                    .map(|_| loop {
                        let v = rng.random_range(0..n);
                        if v != u {
                            break (v, 0.5);
                        }
                    })
                    .collect();
                (u, list)
            })
            .collect();
        let g = SimilarityGraph {
            snapshot_version: 0,
            config_hash: String::new(),
            edges,
        };
        total += neighbor_purity(&g, &labels).unwrap();
    }
    let mean = total / seeds as f64;
    assert!((mean - 1.0 / c as f64).abs() < 0.01, "{mean}");
}

#[test]
fn purity_edge_cases() {
    let labels = BTreeMap::from([(1, 0), (2, 0), (3, 1)]);
    let g = |edges: Vec<(u64, Vec<(u64, f64)>)>| SimilarityGraph {
        snapshot_version: 0,
        config_hash: String::new(),
        edges: edges.into_iter().collect(),
    };
    assert_eq!(neighbor_purity(&g(vec![(1, vec![(2, 0.9)]), (2, vec![(1, 0.9)])]), &labels).unwrap(), 1.0);
    assert_eq!(neighbor_purity(&g(vec![(1, vec![])]), &labels).unwrap(), 0.0);
    assert!(neighbor_purity(&g(vec![(1, vec![(9, 0.1)])]), &labels).is_err());
}

#[test]
fn recall_and_percent_formatting() {
    let retrieved = BTreeSet::from([1, 2, 3]);
    assert_eq!(retrieval_recall(&retrieved, &BTreeSet::from([2, 3, 4, 5])).unwrap(), 0.5);
    assert!(retrieval_recall(&retrieved, &BTreeSet::new()).is_err());
    assert_eq!(format_percent(12.3456), "12.35%");
}
