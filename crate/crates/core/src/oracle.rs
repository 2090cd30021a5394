//! Closed-form co-occurrence expectation baseline.
//!
//! Frequencies are counted per room context (the room label plus the labels
//! of the objects it contains) with add-α smoothing:
//!
//! * `P(b) = (rooms containing b + α) / (rooms + 2α)`
//! * `P(a_i ∩ b) = (Σ over rooms containing b of the mean ground-truth mass
//!   on slot i + α) / (rooms + 2α)`
//!
//! A node's affordance slot `i` is then scored against its observed context
//! `B = {b_1..b_m}` as
//!
//! ```text
//! score(a_i) = Σ_j P(a_i ∩ b_j) / Π_j P(b_j)
//! ```
//!
//! and the scores of the node's group are normalized into a distribution.
//! The expression is evaluated as written; it is not the independence
//! posterior `P(a_i | B)`, and the normalization is what turns it into a
//! probability vector.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{Ontology, ROOM_LABEL};
use crate::scene_graph::{Layer, SceneGraph};

pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("cannot fit on an empty corpus (no rooms)")]
    EmptyCorpus,
    #[error("smoothing constant must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("class `{0}` owns no affordance group")]
    NoGroup(String),
    #[error("unknown class label `{0}`")]
    UnknownClass(String),
    #[error("node {0} is not an object inside a room")]
    NotInRoom(usize),
    #[error("table was fitted for a different ontology ({0})")]
    OntologyMismatch(String),
    #[error("{origin}: {message}")]
    Io { origin: String, message: String },
}

/// Smoothed room-level frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub alpha: f64,
    pub rooms: usize,
    /// Vocabulary, in ontology order.
    pub labels: Vec<String>,
    /// `marginal[j] = P(b_j)`
    pub marginal: Vec<f64>,
    /// `joint[i][j] = P(a_i ∩ b_j)` over global slots `i`.
    pub joint: Vec<Vec<f64>>,
}

/// Fits frequencies over every room of the given ground-truth graphs.
pub fn fit<'a>(
    graphs: impl IntoIterator<Item = &'a SceneGraph>,
    ontology: &Ontology,
    alpha: f64,
) -> Result<FrequencyTable, OracleError> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(OracleError::BadAlpha(alpha));
    }
    let vocab = ontology.vocab_size();
    let slots = ontology.slot_count();
    let mut present = vec![0usize; vocab];
    let mut mass_sum = vec![vec![0.0; vocab]; slots];
    let mut rooms = 0usize;

    for graph in graphs {
        let children = graph.children();
        for room in graph.nodes.iter().filter(|n| n.layer == Layer::Rooms) {
            rooms += 1;
            let mut classes = BTreeSet::new();
            classes.insert(
                ontology
                    .index_of(&room.label)
                    .ok_or_else(|| OracleError::UnknownClass(room.label.clone()))?,
            );
            // per-slot (sum, count) over nodes owning the slot
            let mut slot_mass: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for &child in &children[room.id] {
                let node = &graph.nodes[child];
                let class = ontology
                    .index_of(&node.label)
                    .ok_or_else(|| OracleError::UnknownClass(node.label.clone()))?;
                classes.insert(class);
                if let (Some(range), Some(gt)) = (ontology.slot_range_at(class), &node.gt) {
                    for (slot, &v) in range.zip(gt) {
                        let e = slot_mass.entry(slot).or_insert((0.0, 0));
                        e.0 += v;
                        e.1 += 1;
                    }
                }
            }
            for &class in &classes {
                present[class] += 1;
                for (&slot, &(sum, count)) in &slot_mass {
                    mass_sum[slot][class] += sum / count as f64;
                }
            }
        }
    }
    if rooms == 0 {
        return Err(OracleError::EmptyCorpus);
    }
    let denom = rooms as f64 + 2.0 * alpha;
    Ok(FrequencyTable {
        alpha,
        rooms,
        labels: ontology.labels().map(str::to_string).collect(),
        marginal: present.iter().map(|&c| (c as f64 + alpha) / denom).collect(),
        joint: mass_sum
            .into_iter()
            .map(|row| row.into_iter().map(|m| (m + alpha) / denom).collect())
            .collect(),
    })
}

impl FrequencyTable {
    fn check_ontology(&self, ontology: &Ontology) -> Result<(), OracleError> {
        if self.labels.len() != ontology.vocab_size()
            || self.joint.len() != ontology.slot_count()
            || !self.labels.iter().map(String::as_str).eq(ontology.labels())
        {
            return Err(OracleError::OntologyMismatch(format!(
                "table has {} labels and {} slots",
                self.labels.len(),
                self.joint.len()
            )));
        }
        Ok(())
    }

    /// Normalized affordance distribution of `class` given the observed
    /// context classes. The room label is always added to the context.
    pub fn predict(
        &self,
        ontology: &Ontology,
        class: &str,
        context: &[&str],
    ) -> Result<Vec<f64>, OracleError> {
        self.check_ontology(ontology)?;
        let range = ontology
            .slot_range(class)
            .map_err(|_| OracleError::UnknownClass(class.to_string()))?
            .ok_or_else(|| OracleError::NoGroup(class.to_string()))?;
        let mut observed = BTreeSet::new();
        observed.insert(ontology.index_of(ROOM_LABEL).expect("room is reserved"));
        for label in context {
            observed.insert(
                ontology
                    .index_of(label)
                    .ok_or_else(|| OracleError::UnknownClass(label.to_string()))?,
            );
        }

        let denominator: f64 = observed.iter().map(|&j| self.marginal[j]).product();
        let numerators: Vec<f64> = range
            .map(|slot| observed.iter().map(|&j| self.joint[slot][j]).sum())
            .collect();
        let mut scores: Vec<f64> = numerators.iter().map(|n| n / denominator).collect();
        if !scores.iter().all(|s| s.is_finite()) {
            // the product underflowed; it is a shared factor, so drop it
            scores = numerators;
        }
        let total: f64 = scores.iter().sum();
        Ok(scores.into_iter().map(|s| s / total).collect())
    }

    /// Prediction for one object node, using its room siblings (excluding
    /// the node itself) as context.
    pub fn predict_node(
        &self,
        ontology: &Ontology,
        graph: &SceneGraph,
        node: usize,
    ) -> Result<Vec<f64>, OracleError> {
        let room = graph.room_of(node).ok_or(OracleError::NotInRoom(node))?;
        let context: Vec<&str> = graph
            .edges
            .iter()
            .filter(|&&(p, c)| p == room && c != node)
            .map(|&(_, c)| graph.nodes[c].label.as_str())
            .collect();
        self.predict(ontology, &graph.nodes[node].label, &context)
    }

    /// Predictions for every grouped object node of a graph.
    pub fn predict_graph(
        &self,
        ontology: &Ontology,
        graph: &SceneGraph,
    ) -> Result<BTreeMap<usize, Vec<f64>>, OracleError> {
        let mut out = BTreeMap::new();
        for node in graph.nodes.iter().filter(|n| n.layer == Layer::Objects) {
            if ontology.slot_range(&node.label).ok().flatten().is_some() {
                out.insert(node.id, self.predict_node(ontology, graph, node.id)?);
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("table serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), OracleError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| OracleError::Io {
            origin: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, OracleError> {
        let path = path.as_ref();
        let io = |message: String| OracleError::Io {
            origin: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::Node;

    fn ontology() -> Ontology {
        Ontology::from_toml_str(
            r#"
[[class]]
label = "chair"
affordances = ["carried", "dragged", "stepped"]
[[class.subcategory]]
name = "office-chair"
weights = [0, 1, 0]
[[class]]
label = "desk"
[[class]]
label = "bed"
[[class]]
label = "room"
[[class]]
label = "building"
"#,
            "test",
        )
        .unwrap()
    }

    /// One building, one room per entry listing its object labels.
    fn building(rooms: &[&[(&str, Option<[f64; 3]>)]]) -> SceneGraph {
        let mut g = SceneGraph::default();
        g.nodes.push(Node::new(0, Layer::Building, "building"));
        for objects in rooms {
            let room = g.nodes.len();
            g.nodes.push(Node::new(room, Layer::Rooms, "room"));
            g.edges.push((0, room));
            for (label, gt) in objects.iter() {
                let id = g.nodes.len();
                let mut n = Node::new(id, Layer::Objects, *label);
                n.gt = gt.map(|v| v.to_vec());
                g.nodes.push(n);
                g.edges.push((room, id));
            }
        }
        g
    }

    #[test]
    fn marginal_counts_rooms() {
        let o = ontology();
        let g = building(&[&[("desk", None)], &[("desk", None)]]);
        let alpha = 0.5;
        let t = fit([&g], &o, alpha).unwrap();
        let desk = o.index_of("desk").unwrap();
        assert_eq!(t.rooms, 2);
        assert_eq!(t.marginal[desk], (2.0 + alpha) / (2.0 + 2.0 * alpha));
    }

    #[test]
    fn absent_class_gets_alpha_share() {
        let o = ontology();
        let g = building(&[&[], &[], &[], &[("desk", None)]]);
        let t = fit([&g], &o, 1.0).unwrap();
        assert_eq!(t.marginal[o.index_of("bed").unwrap()], 1.0 / 6.0);
    }

    #[test]
    fn fit_errors() {
        let o = ontology();
        assert!(matches!(
            fit(std::iter::empty(), &o, 1.0),
            Err(OracleError::EmptyCorpus)
        ));
        let g = building(&[&[]]);
        assert!(matches!(fit([&g], &o, 0.0), Err(OracleError::BadAlpha(_))));
    }

    #[test]
    fn room_only_context_collapses_to_single_ratio() {
        let o = ontology();
        let g = building(&[
            &[("chair", Some([0.0, 1.0, 0.0])), ("desk", None)],
            &[("chair", Some([1.0, 0.0, 0.0]))],
            &[("bed", None)],
        ]);
        let t = fit([&g], &o, 1.0).unwrap();
        let room = o.index_of("room").unwrap();
        let p = t.predict(&o, "chair", &[]).unwrap();
        let scores: Vec<f64> = (0..3).map(|i| t.joint[i][room] / t.marginal[room]).collect();
        let total: f64 = scores.iter().sum();
        for i in 0..3 {
            assert!((p[i] - scores[i] / total).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_counts_give_uniform() {
        let o = ontology();
        let g = building(&[&[("chair", Some([1.0, 1.0, 1.0].map(|v: f64| v / 3.0)))]]);
        let t = fit([&g], &o, 1.0).unwrap();
        let p = t.predict(&o, "chair", &["desk"]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn predict_errors() {
        let o = ontology();
        let g = building(&[&[("desk", None)]]);
        let t = fit([&g], &o, 1.0).unwrap();
        assert!(matches!(t.predict(&o, "desk", &[]), Err(OracleError::NoGroup(_))));
        assert!(matches!(
            t.predict(&o, "chair", &["sofa"]),
            Err(OracleError::UnknownClass(_))
        ));
        assert!(matches!(
            t.predict(&Ontology::builtin_default(), "chair", &[]),
            Err(OracleError::OntologyMismatch(_))
        ));
    }

    #[test]
    fn node_context_excludes_itself() {
        let o = ontology();
        let g = building(&[
            &[("chair", Some([0.0, 1.0, 0.0])), ("desk", None)],
            &[("chair", Some([1.0, 0.0, 0.0]))],
        ]);
        let t = fit([&g], &o, 1.0).unwrap();
        // node 2 is the chair in the first room, whose context is {room, desk}
        assert_eq!(
            t.predict_node(&o, &g, 2).unwrap(),
            t.predict(&o, "chair", &["desk"]).unwrap()
        );
        // the lone chair in the second room sees only the room
        let lone = g.nodes.iter().rposition(|n| n.label == "chair").unwrap();
        assert_eq!(
            t.predict_node(&o, &g, lone).unwrap(),
            t.predict(&o, "chair", &[]).unwrap()
        );
        let all = t.predict_graph(&o, &g).unwrap();
        assert_eq!(all.len(), 2);
        assert!(matches!(t.predict_node(&o, &g, 1), Err(OracleError::NotInRoom(1))));
    }

    #[test]
    fn json_round_trip() {
        let o = ontology();
        let g = building(&[&[("chair", Some([0.0, 1.0, 0.0]))]]);
        let t = fit([&g], &o, 1.0).unwrap();
        let back: FrequencyTable = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(back, t);
    }
}
