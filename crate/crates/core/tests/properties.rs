#[path = "common/graphs.rs"]
mod graphs;

use std::collections::BTreeSet;

use ceci_core::datagen::{augment, deletion_budget};
use ceci_core::metrics::{energy_distance, wasserstein_1d};
use ceci_core::{CeciConfig, Layer, Model, Ontology};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_distributions(ontology: &Ontology, graph: &ceci_core::SceneGraph, model: &Model) {
    let prediction = model.predict(ontology, graph).unwrap();
    let grouped = graph
        .nodes
        .iter()
        .filter(|n| ontology.slot_range(&n.label).unwrap().is_some())
        .count();
    assert_eq!(prediction.len(), grouped);
    for (node, dist) in &prediction {
        let sum: f64 = dist.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "node {node}: sum {sum}");
        assert!(dist.iter().all(|&v| v >= 0.0 && v.is_finite()), "node {node}: {dist:?}");
    }
}

#[test]
fn predictions_are_distributions() {
    let ontology = Ontology::builtin_desk();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for m in 0..10u64 {
        let config = CeciConfig {
            depth: rng.gen_range(1..=9),
            hidden: rng.gen_range(2..=32),
            seed: m,
            ..CeciConfig::default()
        };
        let model = Model::new(config, &ontology).unwrap();
        for _ in 0..100 {
            let n = rng.gen_range(0..40);
            let graph = graphs::random_graph(&ontology, n, &mut rng);
            assert_distributions(&ontology, &graph, &model);
        }
    }
}

#[test]
fn deepest_augmentation_deletes_the_budget() {
    let ontology = Ontology::builtin_desk();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for n in 1..=50 {
        for _ in 0..5 {
            let graph = graphs::random_graph(&ontology, n, &mut rng);
            let budget = deletion_budget(n, 0.2);
            assert_eq!(budget, n / 5);
            let variants = augment(&graph, 0.2, &mut rng);
            assert_eq!(variants.len(), budget);
            for (k, v) in variants.iter().enumerate() {
                assert_eq!(v.count_layer(Layer::Objects), n - (k + 1));
                assert_eq!(v.count_layer(Layer::Rooms), graph.count_layer(Layer::Rooms));
                assert_eq!(v.count_layer(Layer::Building), 1);
                assert!(v.is_valid(Some(&ontology)), "{:?}", v.validate(Some(&ontology)));
            }
            // nested: each variant's objects are a subset of the previous one's
            let labels = |g: &ceci_core::SceneGraph| -> BTreeSet<(String, Option<String>)> {
                g.nodes.iter().map(|n| (n.label.clone(), n.subcategory.clone())).collect()
            };
            for pair in variants.windows(2) {
                assert!(labels(&pair[1]).is_subset(&labels(&pair[0])));
            }
        }
    }
}

#[test]
fn predictions_follow_node_permutations() {
    let ontology = Ontology::builtin_desk();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let config = CeciConfig {
        depth: 4,
        hidden: 16,
        ..CeciConfig::default()
    };
    let model = Model::new(config, &ontology).unwrap();
    for _ in 0..20 {
        let n = rng.gen_range(1..30);
        let graph = graphs::random_graph(&ontology, n, &mut rng);
        let base = model.predict(&ontology, &graph).unwrap();
        let order = graphs::random_order(graph.len(), &mut rng);
        let permuted = model.predict(&ontology, &graph.permuted(&order)).unwrap();
        for (new, &old) in order.iter().enumerate() {
            if let Some(expected) = base.get(&old) {
                let got = &permuted[&new];
                for (a, b) in expected.iter().zip(got) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("nonzero mass", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-6).then(|| w.into_iter().map(|v| v / s).collect())
    })
}

fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..7).prop_flat_map(|k| (distribution(k), distribution(k), distribution(k)))
}

proptest! {
    #[test]
    fn wasserstein_is_a_metric((p, q, r) in triple()) {
        let pq = wasserstein_1d(&p, &q).unwrap();
        let qr = wasserstein_1d(&q, &r).unwrap();
        let pr = wasserstein_1d(&p, &r).unwrap();
        prop_assert!(pr <= pq + qr + 1e-12);
        prop_assert_eq!(pq, wasserstein_1d(&q, &p).unwrap());
        prop_assert!(pq >= 0.0);
    }

    #[test]
    fn energy_is_symmetric_and_bounded((p, q, _r) in triple()) {
        let e = energy_distance(&p, &q).unwrap();
        prop_assert_eq!(e, energy_distance(&q, &p).unwrap());
        prop_assert!(e >= 0.0 && e.is_finite());
        // 2·∫(F−G)² ≤ 2·∫|F−G| on unit spacing, since |F−G| ≤ 1
        prop_assert!(e * e <= 2.0 * wasserstein_1d(&p, &q).unwrap() + 1e-12);
    }
}
