//! Trust propagation against an exhaustive prefix search, and its
//! structural properties.

mod common;

use common::{first_gap_benign, random_scores};
use flcleaner::defense::{trust_propagate, ClientScore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scores(eps: &[f64]) -> Vec<ClientScore> {
    eps.iter().enumerate().map(|(i, &e)| ClientScore::new(i, e)).collect()
}

fn benign(eps: &[f64], lambda: f64) -> Vec<usize> {
    trust_propagate(&scores(eps), lambda).unwrap().benign_ids
}

#[test]
fn hand_trace_keeps_the_three_lowest() {
    let d = trust_propagate(&scores(&[0.01, 0.012, 0.013, 0.50, 0.52]), 0.3).unwrap();
    assert_eq!(d.benign_ids, vec![0, 1, 2]);
    assert_eq!(d.blocked_ids, vec![3, 4]);
    assert!((d.delta - 0.153).abs() < 1e-12);
}

#[test]
fn matches_exhaustive_search_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let eps = random_scores(&mut rng);
        let lambda = rng.random_range(0.0..=1.0);
        assert_eq!(benign(&eps, lambda), first_gap_benign(&eps, lambda), "eps {eps:?} lambda {lambda}");
    }
}

#[test]
fn benign_set_grows_with_lambda_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let eps = random_scores(&mut rng);
        let (a, b) = (rng.random_range(0.0..=1.0f64), rng.random_range(0.0..=1.0f64));
        let (lo, hi) = (a.min(b), a.max(b));
        let small = benign(&eps, lo);
        let large = benign(&eps, hi);
        assert!(small.iter().all(|id| large.contains(id)), "eps {eps:?}: {small:?} not within {large:?}");
    }
}

#[test]
fn identical_scores_are_all_benign() {
    assert_eq!(benign(&[0.2; 6], 0.3), vec![0, 1, 2, 3, 4, 5]);
}

proptest! {
    #[test]
    fn never_empty_and_partitions_the_input(eps in prop::collection::vec(0.0f64..10.0, 1..30), lambda in 0.0f64..=1.0) {
        let d = trust_propagate(&scores(&eps), lambda).unwrap();
        prop_assert!(!d.benign_ids.is_empty());
        let mut all: Vec<usize> = d.benign_ids.iter().chain(&d.blocked_ids).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..eps.len()).collect::<Vec<_>>());
    }

    #[test]
    fn permutation_invariant(eps in prop::collection::vec(0.0f64..1.0, 1..15), lambda in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..eps.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<ClientScore> = order.iter().map(|&i| ClientScore::new(i, eps[i])).collect();
        let mut a = trust_propagate(&scores(&eps), lambda).unwrap().benign_ids;
        let mut b = trust_propagate(&shuffled, lambda).unwrap().benign_ids;
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn clear_gap_separates_clusters(low in prop::collection::vec(0.0f64..0.01, 1..8), high in prop::collection::vec(1.0f64..1.01, 1..8)) {
        let eps: Vec<f64> = low.iter().chain(&high).copied().collect();
        let mut got = benign(&eps, 0.3);
        got.sort_unstable();
        prop_assert_eq!(got, (0..low.len()).collect::<Vec<_>>());
    }
}
