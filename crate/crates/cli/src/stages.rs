//! One function per pipeline step. Each reads its inputs, writes its
//! outputs and a manifest, and returns what later steps need.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ceci_core::datagen::{self, generate_corpus, GeneratorConfig};
use ceci_core::evaluation::{self, compare_correlations, ClassPrior, CorrelationComparison, EvalReport};
use ceci_core::model::{self, CeciConfig, Model, ModelError, Prediction};
use ceci_core::oracle::{self, FrequencyTable};
use ceci_core::scene_graph::{read_corpus, write_corpus};
use ceci_core::{CorpusRecord, Dataset, Ontology, SceneGraph, Split, SplitManifest};
use serde::Serialize;

use crate::manifest::RunManifest;

/// A builtin resource name or a file path.
#[derive(Debug, Clone, PartialEq)]
pub enum Resource {
    Builtin(String),
    File(PathBuf),
}

impl Resource {
    pub fn parse(spec: &str) -> Self {
        match spec.strip_prefix("builtin:") {
            Some(name) => Resource::Builtin(name.to_string()),
            None => Resource::File(PathBuf::from(spec)),
        }
    }

    /// Resolves a relative file path against `base`.
    pub fn relative_to(self, base: &Path) -> Self {
        match self {
            Resource::File(p) if p.is_relative() => Resource::File(base.join(p)),
            other => other,
        }
    }

    fn record(&self, manifest: RunManifest, role: &str, content: impl FnOnce() -> String) -> Result<RunManifest> {
        match self {
            Resource::File(p) => manifest.input_file(role, p),
            Resource::Builtin(name) => Ok(manifest.input_text(role, &format!("builtin:{name}"), &content())),
        }
    }
}

pub struct OntologyInput {
    pub ontology: Ontology,
    pub source: Resource,
}

impl OntologyInput {
    pub fn load(source: Resource) -> Result<Self> {
        let ontology = match &source {
            Resource::Builtin(name) if name == "desk" => Ontology::builtin_desk(),
            Resource::Builtin(name) if name == "default" => Ontology::builtin_default(),
            Resource::Builtin(name) => bail!("unknown builtin ontology `{name}` (expected desk or default)"),
            Resource::File(p) => Ontology::load(p)?,
        };
        Ok(Self { ontology, source })
    }

    fn record(&self, manifest: RunManifest) -> Result<RunManifest> {
        self.source
            .record(manifest, "ontology", || self.ontology.to_toml_string())
    }
}

pub fn load_generator(source: &Resource) -> Result<GeneratorConfig> {
    Ok(match source {
        Resource::Builtin(name) if name == "desk" => GeneratorConfig::builtin_desk(),
        Resource::Builtin(name) => bail!("unknown builtin generator config `{name}` (expected desk)"),
        Resource::File(p) => GeneratorConfig::load(p)?,
    })
}

pub fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn to_json_line(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

pub fn gen(
    input: &OntologyInput,
    generator: &Resource,
    bases: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<Vec<CorpusRecord>> {
    let mut config = load_generator(generator)?;
    if let Some(n) = bases {
        config.corpus_size = n;
    }
    let records = generate_corpus(&config, &input.ontology, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_corpus(out, &records)?;
    let manifest = RunManifest::new("gen", Some(seed)).config(&config);
    let manifest = input.record(manifest)?;
    let manifest = generator.record(manifest, "generator", || {
        toml::to_string(&config).unwrap_or_default()
    })?;
    manifest.output(out).write_next_to(out)?;
    Ok(records)
}

pub fn split(input: &OntologyInput, corpus: &Path, fractions: [f64; 3], seed: u64, out: &Path) -> Result<SplitManifest> {
    let records = read_corpus(corpus)?;
    let mut dataset = Dataset::from_corpus(&records, &input.ontology)?;
    let manifest = datagen::split(&mut dataset, fractions, seed)?;
    write_output(out, manifest.to_json().as_bytes())?;
    let run = RunManifest::new("split", Some(seed)).config(&fractions);
    input
        .record(run)?
        .input_file("corpus", corpus)?
        .output(out)
        .write_next_to(out)?;
    Ok(manifest)
}

/// Corpus records and the dataset with split assignments applied.
pub fn load_dataset(input: &OntologyInput, corpus: &Path, split: &Path) -> Result<(Vec<CorpusRecord>, Dataset)> {
    let records = read_corpus(corpus)?;
    let mut dataset = Dataset::from_corpus(&records, &input.ontology)?;
    let text = std::fs::read_to_string(split).with_context(|| format!("reading {}", split.display()))?;
    let manifest = SplitManifest::from_json(&text).with_context(|| format!("parsing {}", split.display()))?;
    dataset.apply_split(&manifest)?;
    Ok((records, dataset))
}

fn fit_oracle(input: &OntologyInput, records: &[CorpusRecord], dataset: &Dataset, alpha: f64) -> Result<FrequencyTable> {
    let graphs = records
        .iter()
        .zip(&dataset.examples)
        .filter(|(_, e)| e.split == Some(Split::Train))
        .map(|(r, _)| &r.graph);
    Ok(oracle::fit(graphs, &input.ontology, alpha)?)
}

pub fn oracle_fit(input: &OntologyInput, corpus: &Path, split: &Path, alpha: f64, out: &Path) -> Result<FrequencyTable> {
    let (records, dataset) = load_dataset(input, corpus, split)?;
    let table = fit_oracle(input, &records, &dataset, alpha)?;
    write_output(out, table.to_json().as_bytes())?;
    let run = RunManifest::new("oracle-fit", None).config(&serde_json::json!({ "alpha": alpha }));
    input
        .record(run)?
        .input_file("corpus", corpus)?
        .input_file("split", split)?
        .output(out)
        .write_next_to(out)?;
    Ok(table)
}

#[derive(Debug, Serialize)]
pub struct NodePrediction {
    pub node: usize,
    pub class: String,
    /// `(affordance, probability)` in schema order.
    pub affordances: Vec<(String, f64)>,
}

#[derive(Debug, Serialize)]
pub struct PredictionFile {
    pub predictions: Vec<NodePrediction>,
}

fn describe(ontology: &Ontology, graph: &SceneGraph, prediction: &Prediction) -> PredictionFile {
    let predictions = prediction
        .iter()
        .map(|(&id, dist)| {
            let label = &graph.nodes[id].label;
            let names = ontology
                .class(label)
                .map(|c| c.affordances.clone())
                .unwrap_or_default();
            NodePrediction {
                node: id,
                class: label.clone(),
                affordances: names.into_iter().zip(dist.iter().copied()).collect(),
            }
        })
        .collect();
    PredictionFile { predictions }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_output(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn oracle_predict(input: &OntologyInput, table: &Path, graph: &Path, out: Option<&Path>) -> Result<()> {
    let table_data = FrequencyTable::load(table)?;
    let g = SceneGraph::load(graph)?;
    let prediction = table_data.predict_graph(&input.ontology, &g)?;
    emit(&to_json_line(&describe(&input.ontology, &g, &prediction)), out)?;
    if let Some(out) = out {
        let run = RunManifest::new("oracle-predict", None);
        input
            .record(run)?
            .input_file("table", table)?
            .input_file("graph", graph)?
            .output(out)
            .write_next_to(out)?;
    }
    Ok(())
}

pub fn history_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".history.json");
    checkpoint.with_file_name(name)
}

pub struct TrainSummary {
    pub best_epoch: usize,
    pub history: Vec<model::EpochLoss>,
}

pub fn train(
    input: &OntologyInput,
    corpus: &Path,
    split: &Path,
    config_source: &Resource,
    seed: u64,
    out: &Path,
) -> Result<TrainSummary> {
    let mut config = match config_source {
        Resource::Builtin(name) if name == "default" => CeciConfig::default(),
        Resource::Builtin(name) => bail!("unknown builtin model config `{name}` (expected default)"),
        Resource::File(p) => CeciConfig::load(p)?,
    };
    config.seed = seed;
    let (_, dataset) = load_dataset(input, corpus, split)?;
    let outcome = match model::train(&config, &input.ontology, &dataset) {
        Ok(o) => o,
        Err(ModelError::NonFiniteLoss { epoch, last_finite }) => {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".last-finite");
            let rescue = out.with_file_name(name);
            write_output(&rescue, &last_finite.to_bytes())?;
            bail!(
                "non-finite loss at epoch {epoch}; last finite parameters saved to {}",
                rescue.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    write_output(out, &outcome.model.to_bytes())?;
    let history = history_path(out);
    write_output(&history, to_json_line(&outcome.history).as_bytes())?;
    let run = RunManifest::new("train", Some(seed)).config(&config);
    let run = input.record(run)?;
    let run = config_source.record(run, "model config", || {
        toml::to_string(&config).unwrap_or_default()
    })?;
    run.input_file("corpus", corpus)?
        .input_file("split", split)?
        .output(out)
        .output(&history)
        .write_next_to(out)?;
    Ok(TrainSummary {
        best_epoch: outcome.best_epoch,
        history: outcome.history,
    })
}

pub fn predict(input: &OntologyInput, model_path: &Path, graph: &Path, out: Option<&Path>) -> Result<()> {
    let model = Model::load(model_path)?;
    let g = SceneGraph::load(graph)?;
    let prediction = model.predict(&input.ontology, &g)?;
    emit(&to_json_line(&describe(&input.ontology, &g, &prediction)), out)?;
    if let Some(out) = out {
        let run = RunManifest::new("predict", None);
        input
            .record(run)?
            .input_file("model", model_path)?
            .input_file("graph", graph)?
            .output(out)
            .write_next_to(out)?;
    }
    Ok(())
}

/// Examples of one split with the model's predictions for each.
fn predict_split<'a>(
    input: &OntologyInput,
    model: &Model,
    dataset: &'a Dataset,
    on: Split,
) -> Result<(Vec<&'a ceci_core::Example>, Vec<Prediction>)> {
    let examples: Vec<_> = dataset.in_split(on).collect();
    if examples.is_empty() {
        bail!("empty split: no {} examples", split_name(on));
    }
    let graphs: Vec<&SceneGraph> = examples.iter().map(|e| &e.input).collect();
    let predictions = model.predict_many(&input.ontology, &graphs)?;
    Ok((examples, predictions))
}

pub fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    input: &OntologyInput,
    model_path: &Path,
    corpus: &Path,
    split: &Path,
    on: Split,
    table: Option<&Path>,
    alpha: f64,
    out: &Path,
) -> Result<EvalReport> {
    let model = Model::load(model_path)?;
    let (records, dataset) = load_dataset(input, corpus, split)?;
    let (examples, predictions) = predict_split(input, &model, &dataset, on)?;
    let table_data = match table {
        Some(p) => FrequencyTable::load(p)?,
        None => fit_oracle(input, &records, &dataset, alpha)?,
    };
    let prior = ClassPrior::fit(dataset.in_split(Split::Train));
    let oracle_predictions = examples
        .iter()
        .map(|e| table_data.predict_graph(&input.ontology, &e.input))
        .collect::<Result<Vec<_>, _>>()?;
    let baselines = vec![
        (
            "uniform",
            examples
                .iter()
                .map(|e| evaluation::uniform_predictions(&input.ontology, e))
                .collect(),
        ),
        (
            "class-prior",
            examples.iter().map(|e| prior.predict(&input.ontology, e)).collect(),
        ),
        ("oracle", oracle_predictions),
    ];
    let report = evaluation::evaluate(&input.ontology, Some(on), &examples, &predictions, &baselines)?;
    write_output(out, report.to_json().as_bytes())?;
    let run = RunManifest::new("eval", None).config(&serde_json::json!({
        "split": split_name(on),
        "alpha": table.is_none().then_some(alpha),
    }));
    let mut run = input
        .record(run)?
        .input_file("model", model_path)?
        .input_file("corpus", corpus)?
        .input_file("split", split)?;
    if let Some(p) = table {
        run = run.input_file("oracle table", p)?;
    }
    run.output(out).write_next_to(out)?;
    Ok(report)
}

pub fn correlate(
    input: &OntologyInput,
    model_path: &Path,
    corpus: &Path,
    split: &Path,
    on: Split,
    classes: &[String],
    out: &Path,
) -> Result<Vec<CorrelationComparison>> {
    let model = Model::load(model_path)?;
    let (_, dataset) = load_dataset(input, corpus, split)?;
    let (examples, predictions) = predict_split(input, &model, &dataset, on)?;
    let mut all = compare_correlations(&input.ontology, &examples, &predictions)?;
    if !classes.is_empty() {
        for c in classes {
            if !all.iter().any(|m| &m.class == c) {
                bail!("no `{c}` nodes with an affordance group in the {} split", split_name(on));
            }
        }
        all.retain(|m| classes.contains(&m.class));
    }
    write_output(out, to_json_line(&all).as_bytes())?;
    let run = RunManifest::new("correlate", None).config(&serde_json::json!({
        "split": split_name(on),
        "classes": classes,
    }));
    input
        .record(run)?
        .input_file("model", model_path)?
        .input_file("corpus", corpus)?
        .input_file("split", split)?
        .output(out)
        .write_next_to(out)?;
    Ok(all)
}

/// Reads correlation matrices from either an eval report or a correlate
/// output.
pub fn read_correlations(path: &Path) -> Result<Vec<CorrelationComparison>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(report) = EvalReport::from_json(&text) {
        return Ok(report.correlations);
    }
    serde_json::from_str(&text)
        .with_context(|| format!("{}: neither an eval report nor a correlation list", path.display()))
}

pub fn export_heatmap(input_path: &Path, class: &str, truth: bool, out: &Path) -> Result<()> {
    let all = read_correlations(input_path)?;
    let m = all
        .iter()
        .find(|m| m.class == class)
        .ok_or_else(|| anyhow!("no correlation matrix for class `{class}` in {}", input_path.display()))?;
    let matrix = if truth { &m.truth } else { &m.predicted };
    write_output(out, matrix.to_csv().as_bytes())?;
    RunManifest::new("export-heatmap", None)
        .config(&serde_json::json!({ "class": class, "matrix": if truth { "truth" } else { "predicted" } }))
        .input_file("correlations", input_path)?
        .output(out)
        .write_next_to(out)?;
    Ok(())
}

/// Validation problems, one line each; empty when valid.
pub fn validate(input: &OntologyInput, graph: Option<&Path>, corpus: Option<&Path>) -> Result<Vec<String>> {
    let mut problems = Vec::new();
    if let Some(p) = graph {
        let g = SceneGraph::load(p)?;
        problems.extend(
            g.validate(Some(&input.ontology))
                .into_iter()
                .map(|v| format!("{}: {v}", p.display())),
        );
    }
    if let Some(p) = corpus {
        for (i, r) in read_corpus(p)?.iter().enumerate() {
            problems.extend(
                r.graph
                    .validate(Some(&input.ontology))
                    .into_iter()
                    .map(|v| format!("{}: record {i} (base {}): {v}", p.display(), r.base)),
            );
        }
    }
    Ok(problems)
}
