#[path = "common/recount.rs"]
mod recount;

use ceci_core::oracle::{self, OracleError};
use ceci_core::scene_graph::parse_corpus;
use ceci_core::Ontology;

const TOY_ONTOLOGY: &str = include_str!("fixtures/toy/ontology.toml");
const TOY_CORPUS: &str = include_str!("fixtures/toy/corpus.jsonl");

#[test]
fn toy_fixture_is_small() {
    let ontology = Ontology::from_toml_str(TOY_ONTOLOGY, "toy").unwrap();
    let records = parse_corpus(TOY_CORPUS, "toy").unwrap();
    assert!(records.len() <= 5);
    assert!(ontology.vocab_size() <= 6);
    assert!(records.iter().all(|r| r.graph.is_valid(Some(&ontology))));
}

#[test]
fn fitted_predictions_match_exhaustive_recount() {
    let ontology = Ontology::from_toml_str(TOY_ONTOLOGY, "toy").unwrap();
    let records = parse_corpus(TOY_CORPUS, "toy").unwrap();
    for alpha in [1.0, 0.5, 2.0] {
        let table = oracle::fit(records.iter().map(|r| &r.graph), &ontology, alpha).unwrap();
        let expected = recount::exhaustive(TOY_CORPUS, "chair", 3, alpha);
        assert_eq!(expected.len(), 7);
        for q in expected {
            let got = table
                .predict_node(&ontology, &records[q.graph].graph, q.node)
                .unwrap();
            for (a, b) in got.iter().zip(&q.distribution) {
                assert!((a - b).abs() <= 1e-12, "graph {} node {}: {got:?} vs {:?}", q.graph, q.node, q.distribution);
            }
        }
    }
}

#[test]
fn marginals_match_hand_counts() {
    // 5 rooms; desk in 3, bed in 2, room label in all 5
    let ontology = Ontology::from_toml_str(TOY_ONTOLOGY, "toy").unwrap();
    let records = parse_corpus(TOY_CORPUS, "toy").unwrap();
    let table = oracle::fit(records.iter().map(|r| &r.graph), &ontology, 1.0).unwrap();
    assert_eq!(table.rooms, 5);
    let at = |l: &str| ontology.index_of(l).unwrap();
    assert_eq!(table.marginal[at("desk")], 4.0 / 7.0);
    assert_eq!(table.marginal[at("bed")], 3.0 / 7.0);
    assert_eq!(table.marginal[at("room")], 6.0 / 7.0);
    assert_eq!(table.marginal[at("building")], 1.0 / 7.0);
    // dragged mass: office room 1.0, bed room 0, dining room 0, lone office 1.0, mixed 0.5
    assert_eq!(table.joint[1][at("room")], (2.5 + 1.0) / 7.0);
    assert_eq!(table.joint[1][at("desk")], (1.5 + 1.0) / 7.0);
}

#[test]
fn predictions_are_distributions() {
    let ontology = Ontology::from_toml_str(TOY_ONTOLOGY, "toy").unwrap();
    let records = parse_corpus(TOY_CORPUS, "toy").unwrap();
    let table = oracle::fit(records.iter().map(|r| &r.graph), &ontology, 1.0).unwrap();
    for r in &records {
        for d in table.predict_graph(&ontology, &r.graph).unwrap().values() {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.iter().all(|&v| v >= 0.0));
        }
    }
    assert!(matches!(
        table.predict(&ontology, "desk", &[]),
        Err(OracleError::NoGroup(_))
    ));
}
