use ceci_core::datagen::{generate_corpus, GeneratorConfig};
use ceci_core::model::{batch_examples, CeciConfig, Model, ModelProbe};
use ceci_core::tensor::probes::layer_probes;
use ceci_core::tensor::grad_check;
use ceci_core::{Dataset, Ontology};

#[test]
fn every_layer_matches_finite_differences() {
    for seed in 0..25 {
        for (name, mut probe) in layer_probes(seed) {
            let report = grad_check(probe.as_mut(), 1e-5);
            assert!(
                report.max_relative_error < 1e-4,
                "{name} seed {seed}: {report:?}"
            );
            assert!(report.checked > 0, "{name} seed {seed}: nothing checked");
        }
    }
}

#[test]
fn nine_layer_stack_matches_finite_differences() {
    let ontology = Ontology::builtin_desk();
    let mut gen = GeneratorConfig::builtin_desk();
    gen.corpus_size = 12;
    let corpus = generate_corpus(&gen, &ontology, 3).unwrap();
    let data = Dataset::from_corpus(&corpus, &ontology).unwrap();
    let example = data
        .examples
        .iter()
        .find(|e| e.input.nodes.len() >= 10)
        .expect("a graph with at least 10 nodes");
    for seed in 0..3 {
        let config = CeciConfig {
            depth: 9,
            hidden: 4,
            dropout: 0.3,
            seed,
            ..CeciConfig::default()
        };
        let model = Model::new(config, &ontology).unwrap();
        let batch = batch_examples(&[example], &ontology).unwrap();
        let mut probe = ModelProbe::new(model, batch, seed + 100);
        let report = grad_check(&mut probe, 1e-5);
        assert!(report.max_relative_error < 1e-4, "seed {seed}: {report:?}");
        assert!(report.checked > report.skipped);
    }
}
