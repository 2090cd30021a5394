//! Semantic-class vocabulary and the affordance schema attached to it.
//!
//! An ontology is loaded from a TOML document with one `[[class]]` table per
//! entry-level label, in vocabulary order:
//!
//! ```toml
//! [[class]]
//! label = "chair"
//! affordances = ["carried", "dragged", "stepped"]
//!
//! [[class.subcategory]]
//! name = "office-chair"
//! weights = [0, 1, 0]
//!
//! [[class]]
//! label = "room"
//!
//! [[class]]
//! label = "building"
//! ```
//!
//! Subcategory weights are raw, nonnegative annotations. They are normalized
//! on load into the ground-truth affordance distribution of the subcategory.
//! Every class that owns an affordance group gets a contiguous range in the
//! global slot vector, laid out in vocabulary order.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved label shared by every room node.
pub const ROOM_LABEL: &str = "room";
/// Reserved label of the single root node.
pub const BUILDING_LABEL: &str = "building";

const BUILTIN_DEFAULT: &str = include_str!("../configs/default/ontology.toml");
const BUILTIN_DESK: &str = include_str!("../configs/desk/ontology.toml");

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("{origin}: cannot read ontology: {source}")]
    Io {
        origin: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: parse error: {message}")]
    Parse { origin: String, message: String },
    #[error("{origin}: duplicate class label `{label}`")]
    DuplicateClass { origin: String, label: String },
    #[error("{origin}: reserved label `{label}` must appear exactly once")]
    MissingReserved { origin: String, label: String },
    #[error("{origin}: reserved label `{label}` cannot own an affordance group")]
    ReservedWithGroup { origin: String, label: String },
    #[error("{origin}: class `{label}` has an empty affordance group")]
    EmptyGroup { origin: String, label: String },
    #[error("{origin}: class `{label}` has subcategories but no affordance group")]
    SubcategoryWithoutGroup { origin: String, label: String },
    #[error("{origin}: duplicate subcategory `{class}/{name}`")]
    DuplicateSubcategory {
        origin: String,
        class: String,
        name: String,
    },
    #[error(
        "{origin}: subcategory `{class}/{name}` has vector length {got}, \
         but the group of `{class}` has {expected} affordances"
    )]
    LengthMismatch {
        origin: String,
        class: String,
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("{origin}: subcategory `{class}/{name}`: {source}")]
    Annotation {
        origin: String,
        class: String,
        name: String,
        #[source]
        source: AnnotationError,
    },
    #[error("unknown class label `{0}`")]
    UnknownClass(String),
    #[error("unknown subcategory `{class}/{name}`")]
    UnknownSubcategory { class: String, name: String },
}

/// Problems with a raw affordance annotation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnnotationError {
    #[error("negative affordance weight {value} at position {position}")]
    NegativeWeight { position: usize, value: f64 },
    #[error("non-finite affordance weight at position {position}")]
    NonFinite { position: usize },
    #[error("all-zero annotation cannot be normalized")]
    AllZero,
}

/// Normalizes a raw nonnegative annotation into a probability vector.
pub fn normalize_annotation(raw: &[f64]) -> Result<Vec<f64>, AnnotationError> {
    for (position, &value) in raw.iter().enumerate() {
        if !value.is_finite() {
            return Err(AnnotationError::NonFinite { position });
        }
        if value < 0.0 {
            return Err(AnnotationError::NegativeWeight { position, value });
        }
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(AnnotationError::AllZero);
    }
    Ok(raw.iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subcategory {
    pub name: String,
    /// Raw annotation as written in the configuration.
    pub weights: Vec<f64>,
    /// Normalized ground-truth affordance distribution.
    pub affordance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDef {
    pub label: String,
    /// Empty for classes that own no affordance group.
    pub affordances: Vec<String>,
    pub subcategories: Vec<Subcategory>,
}

impl ClassDef {
    pub fn has_group(&self) -> bool {
        !self.affordances.is_empty()
    }

    pub fn subcategory(&self, name: &str) -> Option<&Subcategory> {
        self.subcategories.iter().find(|s| s.name == name)
    }
}

/// Validated, immutable ontology.
#[derive(Debug, Clone, PartialEq)]
pub struct Ontology {
    classes: Vec<ClassDef>,
    index: HashMap<String, usize>,
    slots: Vec<Option<Range<usize>>>,
    slot_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OntologyFile {
    #[serde(rename = "class")]
    classes: Vec<ClassEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassEntry {
    label: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    affordances: Vec<String>,
    #[serde(default, rename = "subcategory", skip_serializing_if = "Vec::is_empty")]
    subcategories: Vec<SubcategoryEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubcategoryEntry {
    name: String,
    weights: Vec<f64>,
}

impl Ontology {
    /// Reads and validates an ontology file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, OntologyError> {
        let path = path.as_ref();
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| OntologyError::Io {
            origin: origin.clone(),
            source,
        })?;
        Self::from_toml_str(&text, &origin)
    }

    /// Parses an ontology document; `origin` names the source in diagnostics.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, OntologyError> {
        let file: OntologyFile = toml::from_str(text).map_err(|e| OntologyError::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        Self::from_file(file, origin)
    }

    /// The shipped 45-class ontology.
    pub fn builtin_default() -> Self {
        Self::from_toml_str(BUILTIN_DEFAULT, "<builtin default>").expect("builtin ontology is valid")
    }

    /// The 8-class ontology used by the desk-scale experiment.
    pub fn builtin_desk() -> Self {
        Self::from_toml_str(BUILTIN_DESK, "<builtin desk>").expect("builtin ontology is valid")
    }

    fn from_file(file: OntologyFile, origin: &str) -> Result<Self, OntologyError> {
        let origin_s = || origin.to_string();
        let mut classes = Vec::with_capacity(file.classes.len());
        let mut index = HashMap::new();
        for entry in file.classes {
            if index.contains_key(&entry.label) {
                return Err(OntologyError::DuplicateClass {
                    origin: origin_s(),
                    label: entry.label,
                });
            }
            let reserved = entry.label == ROOM_LABEL || entry.label == BUILDING_LABEL;
            if reserved && (!entry.affordances.is_empty() || !entry.subcategories.is_empty()) {
                return Err(OntologyError::ReservedWithGroup {
                    origin: origin_s(),
                    label: entry.label,
                });
            }
            if entry.affordances.is_empty() && !entry.subcategories.is_empty() {
                return Err(OntologyError::SubcategoryWithoutGroup {
                    origin: origin_s(),
                    label: entry.label,
                });
            }
            let mut subcategories: Vec<Subcategory> = Vec::with_capacity(entry.subcategories.len());
            for sub in entry.subcategories {
                if subcategories.iter().any(|s| s.name == sub.name) {
                    return Err(OntologyError::DuplicateSubcategory {
                        origin: origin_s(),
                        class: entry.label,
                        name: sub.name,
                    });
                }
                if sub.weights.len() != entry.affordances.len() {
                    return Err(OntologyError::LengthMismatch {
                        origin: origin_s(),
                        class: entry.label,
                        name: sub.name,
                        expected: entry.affordances.len(),
                        got: sub.weights.len(),
                    });
                }
                let affordance =
                    normalize_annotation(&sub.weights).map_err(|source| OntologyError::Annotation {
                        origin: origin_s(),
                        class: entry.label.clone(),
                        name: sub.name.clone(),
                        source,
                    })?;
                subcategories.push(Subcategory {
                    name: sub.name,
                    weights: sub.weights,
                    affordance,
                });
            }
            index.insert(entry.label.clone(), classes.len());
            classes.push(ClassDef {
                label: entry.label,
                affordances: entry.affordances,
                subcategories,
            });
        }
        for reserved in [ROOM_LABEL, BUILDING_LABEL] {
            if !index.contains_key(reserved) {
                return Err(OntologyError::MissingReserved {
                    origin: origin_s(),
                    label: reserved.to_string(),
                });
            }
        }

        let mut slots = Vec::with_capacity(classes.len());
        let mut next = 0;
        for class in &classes {
            if class.has_group() {
                slots.push(Some(next..next + class.affordances.len()));
                next += class.affordances.len();
            } else {
                slots.push(None);
            }
        }
        Ok(Self {
            classes,
            index,
            slots,
            slot_count: next,
        })
    }

    /// Serializes back to the TOML schema accepted by [`Ontology::load`].
    pub fn to_toml_string(&self) -> String {
        let file = OntologyFile {
            classes: self
                .classes
                .iter()
                .map(|c| ClassEntry {
                    label: c.label.clone(),
                    affordances: c.affordances.clone(),
                    subcategories: c
                        .subcategories
                        .iter()
                        .map(|s| SubcategoryEntry {
                            name: s.name.clone(),
                            weights: s.weights.clone(),
                        })
                        .collect(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("ontology serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_toml_string())
    }

    /// Number of labels in the vocabulary, including `room` and `building`.
    pub fn vocab_size(&self) -> usize {
        self.classes.len()
    }

    /// Number of object classes (the vocabulary minus the two reserved labels).
    pub fn object_class_count(&self) -> usize {
        self.classes.len() - 2
    }

    /// Total number of affordance slots across all groups.
    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.label.as_str())
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn class(&self, label: &str) -> Result<&ClassDef, OntologyError> {
        self.index_of(label)
            .map(|i| &self.classes[i])
            .ok_or_else(|| OntologyError::UnknownClass(label.to_string()))
    }

    pub fn class_at(&self, index: usize) -> &ClassDef {
        &self.classes[index]
    }

    /// Slot range of a class, `None` when the class owns no group.
    pub fn slot_range(&self, label: &str) -> Result<Option<Range<usize>>, OntologyError> {
        self.index_of(label)
            .map(|i| self.slots[i].clone())
            .ok_or_else(|| OntologyError::UnknownClass(label.to_string()))
    }

    pub fn slot_range_at(&self, index: usize) -> Option<Range<usize>> {
        self.slots[index].clone()
    }

    /// Normalized ground-truth vector of a subcategory.
    pub fn gt_vector(&self, class: &str, subcategory: &str) -> Result<&[f64], OntologyError> {
        let def = self.class(class)?;
        def.subcategory(subcategory)
            .map(|s| s.affordance.as_slice())
            .ok_or_else(|| OntologyError::UnknownSubcategory {
                class: class.to_string(),
                name: subcategory.to_string(),
            })
    }

    /// Labels of classes that own an affordance group, in vocabulary order.
    pub fn group_classes(&self) -> impl Iterator<Item = &str> {
        self.classes
            .iter()
            .filter(|c| c.has_group())
            .map(|c| c.label.as_str())
    }

    /// Class index and in-group offset owning a global slot.
    pub fn slot_owner(&self, slot: usize) -> Option<(usize, usize)> {
        self.slots.iter().enumerate().find_map(|(i, r)| match r {
            Some(r) if r.contains(&slot) => Some((i, slot - r.start)),
            _ => None,
        })
    }

    /// Human-readable `class:affordance` name of a global slot.
    pub fn slot_name(&self, slot: usize) -> Option<String> {
        self.slot_owner(slot).map(|(class, offset)| {
            let def = &self.classes[class];
            format!("{}:{}", def.label, def.affordances[offset])
        })
    }
}

impl fmt::Display for Ontology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ontology with {} object classes, {} affordance slots",
            self.object_class_count(),
            self.slot_count
        )
    }
}
