//! Randomized cross-module invariants.

use proptest::prelude::*;

use reachlab_core::dataset::{generate_train_test, Label};
use reachlab_core::graphs::{
    classify_pair, generate_chain_graph, generate_grid_graph, grid_connectivity_via_embedding,
    node_to_vector, transitive_closure, PairClass,
};
use reachlab_core::seeded_rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The digit expansion inverts through positional notation.
    #[test]
    fn digit_expansion_round_trips(node in 0u64..10_000, base in 2u64..12, k in 1u32..8) {
        prop_assume!((base as u128).pow(k) > node as u128);
        let digits = node_to_vector(node, base, k).unwrap();
        prop_assert_eq!(digits.len(), k as usize);
        let rebuilt: u64 = digits
            .iter()
            .rev()
            .fold(0u64, |acc, &d| acc * base + u64::from(d));
        prop_assert_eq!(rebuilt, node);
        prop_assert!(digits.iter().all(|&d| u64::from(d) < base));
    }

    /// The vector-difference criterion agrees with BFS on every ordered pair
    /// of every grid graph.
    #[test]
    fn embedding_criterion_equals_bfs(n in 2usize..120, k in 1usize..=5) {
        let (graph, embedding) = generate_grid_graph(n, k).unwrap();
        let closure = transitive_closure(&graph);
        for u in 0..n as u32 {
            for v in 0..n as u32 {
                if u == v {
                    continue;
                }
                prop_assert_eq!(
                    grid_connectivity_via_embedding(&embedding, u, v).unwrap(),
                    closure.is_reachable(u, v),
                    "pair ({}, {}) at n={} k={}", u, v, n, k
                );
            }
        }
    }

    /// Chain graphs obey the component census and unit-degree contract.
    #[test]
    fn chain_census_holds(n in 2usize..200, chains_fraction in 0.0f64..1.0, seed in 0u64..1 << 48) {
        let chains = 1 + ((n - 1) as f64 * chains_fraction) as usize;
        let graph = generate_chain_graph(n, chains, &mut seeded_rng(seed)).unwrap();
        let length = n / chains;
        let remainder = n % chains;
        let mut expected: Vec<usize> = std::iter::repeat_n(length, chains).collect();
        if remainder > 0 {
            expected.push(remainder);
        }
        expected.sort_unstable();
        let mut sizes: Vec<usize> =
            graph.weakly_connected_components().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        prop_assert_eq!(sizes, expected);
        for node in 0..n as u32 {
            prop_assert!(graph.out_degree(node) <= 1);
            prop_assert!(graph.in_degree(node) <= 1);
        }
    }

    /// Pair classification partitions ordered distinct pairs: positives and
    /// reverse negatives pair up one to one, disconnection is symmetric.
    #[test]
    fn classification_partitions_pairs(n in 2usize..60, chains in 1usize..8, seed in 0u64..1 << 48) {
        prop_assume!(chains <= n);
        let graph = generate_chain_graph(n, chains, &mut seeded_rng(seed)).unwrap();
        let closure = transitive_closure(&graph);
        let mut positive = 0usize;
        let mut reverse = 0usize;
        let mut disconnected = 0usize;
        for u in 0..n as u32 {
            for v in 0..n as u32 {
                if u == v {
                    continue;
                }
                match classify_pair(&closure, u, v).unwrap() {
                    PairClass::Positive => positive += 1,
                    PairClass::ReverseNegative => reverse += 1,
                    PairClass::DisconnectedNegative => disconnected += 1,
                }
            }
        }
        prop_assert_eq!(positive, reverse);
        prop_assert_eq!(positive + reverse + disconnected, n * (n - 1));
        prop_assert_eq!(disconnected % 2, 0);
    }

    /// Generated splits stay disjoint, cover all ordered distinct pairs,
    /// carry oracle labels, and keep reverse pairs together in test.
    #[test]
    fn splits_stay_sound(n in 6usize..80, k in 1usize..=3, seed in 0u64..1 << 48) {
        let (graph, _) = generate_grid_graph(n, k).unwrap();
        let closure = transitive_closure(&graph);
        let multi_hop = (0..n as u32)
            .flat_map(|u| (0..n as u32).map(move |v| (u, v)))
            .filter(|&(u, v)| u != v && closure.dist(u, v).map(|d| d > 1).unwrap_or(false))
            .count();
        let pos_test = multi_hop.min(10);
        let split = generate_train_test(
            &graph,
            &closure,
            "prop-grid",
            pos_test,
            10,
            seed,
            &mut seeded_rng(seed),
        )
        .unwrap();

        let mut seen = std::collections::HashSet::new();
        for example in split.train.iter().chain(&split.test) {
            prop_assert!(example.start != example.goal);
            prop_assert!(seen.insert((example.start, example.goal)));
            prop_assert_eq!(
                example.label == Label::Y,
                closure.is_reachable(example.start, example.goal)
            );
        }
        prop_assert_eq!(seen.len(), n * (n - 1));

        let test_pairs: std::collections::HashSet<(u32, u32)> =
            split.test.iter().map(|e| (e.start, e.goal)).collect();
        for example in &split.test {
            if example.label == Label::Y {
                prop_assert!(closure.dist(example.start, example.goal).unwrap() > 1);
                prop_assert!(test_pairs.contains(&(example.goal, example.start)));
            }
        }

        // Identical seeds rebuild identical splits.
        let again = generate_train_test(
            &graph,
            &closure,
            "prop-grid",
            pos_test,
            10,
            seed,
            &mut seeded_rng(seed),
        )
        .unwrap();
        prop_assert_eq!(split, again);
    }
}
