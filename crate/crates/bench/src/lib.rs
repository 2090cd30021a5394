//! Shared fixtures for the criterion benches.

use ceci_core::datagen::{generate_corpus, split, GeneratorConfig};
use ceci_core::{Dataset, Ontology};

/// Desk corpus with `bases` base graphs, split 80/10/10.
pub fn desk_dataset(bases: usize, seed: u64) -> (Ontology, Dataset) {
    let ontology = Ontology::builtin_desk();
    let mut config = GeneratorConfig::builtin_desk();
    config.corpus_size = bases;
    let corpus = generate_corpus(&config, &ontology, seed).expect("desk generator is valid");
    let mut data = Dataset::from_corpus(&corpus, &ontology).expect("generated corpus is valid");
    split(&mut data, [0.8, 0.1, 0.1], seed).expect("fractions are valid");
    (ontology, data)
}
