//! Byte-stability of generated corpora. Regenerate the fixture with
//! `CECI_BLESS=1 cargo test -p ceci-core --test golden` after an intended
//! change to the generator.

use ceci_core::datagen::{generate_corpus, GeneratorConfig};
use ceci_core::scene_graph::{corpus_to_string, parse_corpus};
use ceci_core::Ontology;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden/corpus.jsonl");

fn desk_corpus() -> String {
    let ontology = Ontology::builtin_desk();
    let mut config = GeneratorConfig::builtin_desk();
    config.corpus_size = 3;
    corpus_to_string(&generate_corpus(&config, &ontology, 42).unwrap())
}

#[test]
fn desk_corpus_matches_fixture() {
    let text = desk_corpus();
    if std::env::var_os("CECI_BLESS").is_some() {
        std::fs::write(FIXTURE, &text).unwrap();
    }
    let expected = std::fs::read_to_string(FIXTURE).unwrap();
    assert_eq!(text, expected);
}

#[test]
fn fixture_round_trips() {
    let expected = std::fs::read_to_string(FIXTURE).unwrap();
    let records = parse_corpus(&expected, "golden").unwrap();
    assert_eq!(corpus_to_string(&records), expected);
    let ontology = Ontology::builtin_desk();
    for r in &records {
        assert!(r.graph.is_valid(Some(&ontology)));
    }
}
