//! Procedural ground-truth corpora, random object deletion, and
//! leakage-free train/val/test splits.
//!
//! The generator configuration is TOML:
//!
//! ```toml
//! corpus_size = 300
//! augment_ratio = 0.2
//! rooms = [0.0, 0.3, 0.4, 0.3]     # P(rooms per building = index)
//!
//! [[archetype]]
//! name = "office"
//! weight = 0.25
//!
//! [[archetype.object]]
//! class = "chair"
//! counts = [0.1, 0.5, 0.4]         # P(instances = index)
//! subcategories = { office-chair = 0.95, stool = 0.05 }
//! ```
//!
//! Grouped classes without a `subcategories` table draw uniformly from the
//! ontology's subcategories.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{Ontology, BUILDING_LABEL, ROOM_LABEL};
use crate::scene_graph::{CorpusRecord, Layer, Node, SceneGraph};

const BUILTIN_DESK: &str = include_str!("../configs/desk/generator.toml");

const TABLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("{origin}: cannot read generator config: {source}")]
    Io {
        origin: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: parse error: {message}")]
    Parse { origin: String, message: String },
    #[error("{table} probabilities sum to {sum}, expected 1")]
    Unnormalized { table: String, sum: f64 },
    #[error("{table} has a negative or non-finite probability")]
    BadProbability { table: String },
    #[error("archetype `{archetype}` references unknown class `{class}`")]
    UnknownClass { archetype: String, class: String },
    #[error("archetype `{archetype}` places reserved label `{class}` as an object")]
    ReservedClass { archetype: String, class: String },
    #[error("archetype `{archetype}` references unknown subcategory `{class}/{name}`")]
    UnknownSubcategory {
        archetype: String,
        class: String,
        name: String,
    },
    #[error("class `{class}` owns an affordance group but has no subcategories")]
    NoSubcategories { class: String },
    #[error("generator config has no archetypes")]
    NoArchetypes,
    #[error("augment ratio {0} outside [0, 1)")]
    BadRatio(f64),
    #[error("split fractions {0:?} must be nonnegative and sum to 1")]
    BadFractions([f64; 3]),
    #[error("record {index} (base {base}): object node {node} of class `{class}` has no ground truth")]
    MissingTarget {
        index: usize,
        base: usize,
        node: usize,
        class: String,
    },
    #[error("record {index} (base {base}) is invalid: {message}")]
    InvalidRecord {
        index: usize,
        base: usize,
        message: String,
    },
    #[error("split manifest does not cover base graph {0}")]
    Unassigned(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub class: String,
    /// `counts[k]` = probability of exactly `k` instances.
    pub counts: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subcategories: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Archetype {
    pub name: String,
    pub weight: f64,
    #[serde(default, rename = "object")]
    pub objects: Vec<ObjectSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub corpus_size: usize,
    #[serde(default = "default_ratio")]
    pub augment_ratio: f64,
    /// `rooms[k]` = probability of a building with exactly `k` rooms.
    pub rooms: Vec<f64>,
    #[serde(rename = "archetype")]
    pub archetypes: Vec<Archetype>,
}

fn default_ratio() -> f64 {
    0.2
}

fn check_table(name: impl Fn() -> String, values: &[f64]) -> Result<(), DatagenError> {
    if values.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(DatagenError::BadProbability { table: name() });
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > TABLE_TOLERANCE {
        return Err(DatagenError::Unnormalized { table: name(), sum });
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatagenError> {
        let path = path.as_ref();
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| DatagenError::Io {
            origin: origin.clone(),
            source,
        })?;
        Self::from_toml_str(&text, &origin)
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, DatagenError> {
        toml::from_str(text).map_err(|e| DatagenError::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })
    }

    /// Generator for the desk-scale experiment (pairs with
    /// [`Ontology::builtin_desk`]).
    pub fn builtin_desk() -> Self {
        Self::from_toml_str(BUILTIN_DESK, "<builtin desk>").expect("builtin generator parses")
    }

    /// Checks every probability table and every label against the ontology.
    pub fn validate(&self, ontology: &Ontology) -> Result<(), DatagenError> {
        if self.archetypes.is_empty() {
            return Err(DatagenError::NoArchetypes);
        }
        if !(0.0..1.0).contains(&self.augment_ratio) {
            return Err(DatagenError::BadRatio(self.augment_ratio));
        }
        check_table(|| "rooms".to_string(), &self.rooms)?;
        let weights: Vec<f64> = self.archetypes.iter().map(|a| a.weight).collect();
        check_table(|| "archetype weights".to_string(), &weights)?;
        for arch in &self.archetypes {
            for spec in &arch.objects {
                if spec.class == ROOM_LABEL || spec.class == BUILDING_LABEL {
                    return Err(DatagenError::ReservedClass {
                        archetype: arch.name.clone(),
                        class: spec.class.clone(),
                    });
                }
                let class = ontology.class(&spec.class).map_err(|_| DatagenError::UnknownClass {
                    archetype: arch.name.clone(),
                    class: spec.class.clone(),
                })?;
                check_table(|| format!("{}/{} counts", arch.name, spec.class), &spec.counts)?;
                if class.has_group() && class.subcategories.is_empty() {
                    return Err(DatagenError::NoSubcategories {
                        class: spec.class.clone(),
                    });
                }
                if let Some(table) = &spec.subcategories {
                    for name in table.keys() {
                        if class.subcategory(name).is_none() {
                            return Err(DatagenError::UnknownSubcategory {
                                archetype: arch.name.clone(),
                                class: spec.class.clone(),
                                name: name.clone(),
                            });
                        }
                    }
                    let values: Vec<f64> = table.values().copied().collect();
                    check_table(
                        || format!("{}/{} subcategories", arch.name, spec.class),
                        &values,
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Draws an index from a normalized table by inverse CDF.
fn draw(table: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in table.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack at the top; take the last nonzero entry
    table.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples a ground-truth graph together with the archetype index of each
/// room, in room order.
pub fn sample_with_archetypes(
    config: &GeneratorConfig,
    ontology: &Ontology,
    rng: &mut impl Rng,
) -> Result<(SceneGraph, Vec<usize>), DatagenError> {
    let weights: Vec<f64> = config.archetypes.iter().map(|a| a.weight).collect();
    let mut graph = SceneGraph::default();
    graph.nodes.push(Node::new(0, Layer::Building, BUILDING_LABEL));
    let n_rooms = draw(&config.rooms, rng);
    let mut archetypes = Vec::with_capacity(n_rooms);
    for _ in 0..n_rooms {
        let a = draw(&weights, rng);
        archetypes.push(a);
        let arch = &config.archetypes[a];
        let room = graph.nodes.len();
        graph.nodes.push(Node::new(room, Layer::Rooms, ROOM_LABEL));
        graph.edges.push((0, room));
        for spec in &arch.objects {
            let class = ontology.class(&spec.class).map_err(|_| DatagenError::UnknownClass {
                archetype: arch.name.clone(),
                class: spec.class.clone(),
            })?;
            let count = draw(&spec.counts, rng);
            for _ in 0..count {
                let id = graph.nodes.len();
                let mut node = Node::new(id, Layer::Objects, spec.class.clone());
                if class.has_group() {
                    let sub = match &spec.subcategories {
                        Some(table) => {
                            let names: Vec<&String> = table.keys().collect();
                            let probs: Vec<f64> = table.values().copied().collect();
                            class
                                .subcategory(names[draw(&probs, rng)])
                                .expect("validated subcategory")
                        }
                        None => &class.subcategories[rng.gen_range(0..class.subcategories.len())],
                    };
                    node.subcategory = Some(sub.name.clone());
                    node.gt = Some(sub.affordance.clone());
                }
                graph.nodes.push(node);
                graph.edges.push((room, id));
            }
        }
    }
    Ok((graph, archetypes))
}

/// Samples one ground-truth scene graph.
pub fn sample_graph(
    config: &GeneratorConfig,
    ontology: &Ontology,
    rng: &mut impl Rng,
) -> Result<SceneGraph, DatagenError> {
    sample_with_archetypes(config, ontology, rng).map(|(g, _)| g)
}

/// Number of deletions for the deepest augmentation: `floor(ratio · objects)`.
pub fn deletion_budget(objects: usize, ratio: f64) -> usize {
    // the small slack keeps exact products such as 0.2 · 35 from flooring down
    (((ratio * objects as f64) + 1e-9).floor() as usize).min(objects)
}

/// Nested random deletions of object nodes: the `k`-th output has the first
/// `k` nodes of a random object ordering removed, for `k = 1..=D`.
pub fn augment(graph: &SceneGraph, ratio: f64, rng: &mut impl Rng) -> Vec<SceneGraph> {
    let mut objects = graph.object_ids();
    let budget = deletion_budget(objects.len(), ratio);
    if budget == 0 {
        return Vec::new();
    }
    objects.shuffle(rng);
    let mut removed = BTreeSet::new();
    objects
        .into_iter()
        .take(budget)
        .map(|id| {
            removed.insert(id);
            graph.without_nodes(&removed)
        })
        .collect()
}

/// Mixes a base seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `corpus_size` base graphs and their augmentations. Each base
/// graph uses its own derived seed, so the output does not depend on the
/// number of worker threads.
pub fn generate_corpus(
    config: &GeneratorConfig,
    ontology: &Ontology,
    seed: u64,
) -> Result<Vec<CorpusRecord>, DatagenError> {
    config.validate(ontology)?;
    let per_base: Vec<Vec<CorpusRecord>> = (0..config.corpus_size)
        .into_par_iter()
        .map(|base| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, base as u64));
            let graph = sample_graph(config, ontology, &mut rng)?;
            let variants = augment(&graph, config.augment_ratio, &mut rng);
            let mut records = vec![CorpusRecord {
                base,
                deleted: 0,
                graph,
            }];
            records.extend(variants.into_iter().enumerate().map(|(k, g)| CorpusRecord {
                base,
                deleted: k + 1,
                graph: g,
            }));
            Ok(records)
        })
        .collect::<Result<_, DatagenError>>()?;
    Ok(per_base.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A model input: a graph with ground truth removed and its target table.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub base: usize,
    pub deleted: usize,
    pub input: SceneGraph,
    pub targets: BTreeMap<usize, Vec<f64>>,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Strips ground truth into target tables; every grouped object node
    /// must carry ground truth.
    pub fn from_corpus(records: &[CorpusRecord], ontology: &Ontology) -> Result<Self, DatagenError> {
        let mut examples = Vec::with_capacity(records.len());
        for (index, record) in records.iter().enumerate() {
            let violations = record.graph.validate(Some(ontology));
            if let Some(v) = violations.first() {
                return Err(DatagenError::InvalidRecord {
                    index,
                    base: record.base,
                    message: v.to_string(),
                });
            }
            let (input, targets) = record.graph.strip_ground_truth();
            for node in &input.nodes {
                let grouped = ontology
                    .slot_range(&node.label)
                    .ok()
                    .flatten()
                    .is_some();
                if node.layer == Layer::Objects && grouped && !targets.contains_key(&node.id) {
                    return Err(DatagenError::MissingTarget {
                        index,
                        base: record.base,
                        node: node.id,
                        class: node.label.clone(),
                    });
                }
            }
            examples.push(Example {
                base: record.base,
                deleted: record.deleted,
                input,
                targets,
                split: None,
            });
        }
        Ok(Self { examples })
    }

    pub fn base_ids(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.examples.iter().map(|e| e.base).collect();
        set.into_iter().collect()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == Some(split))
    }

    pub fn apply_split(&mut self, manifest: &SplitManifest) -> Result<(), DatagenError> {
        let lookup = manifest.lookup();
        for e in &mut self.examples {
            e.split = Some(*lookup.get(&e.base).ok_or(DatagenError::Unassigned(e.base))?);
        }
        Ok(())
    }
}

/// Base-graph split assignment, stored as a JSON sidecar next to a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    fn lookup(&self) -> BTreeMap<usize, Split> {
        let mut map = BTreeMap::new();
        for (ids, split) in [
            (&self.train, Split::Train),
            (&self.val, Split::Val),
            (&self.test, Split::Test),
        ] {
            for &id in ids {
                map.insert(id, split);
            }
        }
        map
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Assigns whole base graphs (with all their augmentations) to
/// train/val/test. Train and val counts are rounded; test takes the rest.
pub fn split(
    dataset: &mut Dataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitManifest, DatagenError> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > TABLE_TOLERANCE
    {
        return Err(DatagenError::BadFractions(fractions));
    }
    let mut bases = dataset.base_ids();
    let n = bases.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    bases.shuffle(&mut rng);
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut train = bases[..n_train].to_vec();
    let mut val = bases[n_train..n_train + n_val].to_vec();
    let mut test = bases[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    let manifest = SplitManifest {
        seed,
        fractions,
        train,
        val,
        test,
    };
    dataset.apply_split(&manifest)?;
    Ok(manifest)
}
