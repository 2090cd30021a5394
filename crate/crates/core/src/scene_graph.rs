//! Layered scene graphs: one building, its rooms, and the objects inside.
//!
//! A graph is serialized as a single line of JSON with a fixed field order:
//!
//! ```text
//! {"nodes":[{"id":0,"layer":"building","label":"building"},
//!           {"id":1,"layer":"rooms","label":"room"},
//!           {"id":2,"layer":"objects","label":"chair","subcategory":"office-chair","gt":[0.0,1.0,0.0]}],
//!  "edges":[[0,1],[1,2]]}
//! ```
//!
//! (wrapped here for readability). Corpus files hold one [`CorpusRecord`]
//! per LF-terminated line.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{Ontology, BUILDING_LABEL, ROOM_LABEL};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Building,
    Rooms,
    Objects,
}

impl Layer {
    fn depth(self) -> u8 {
        match self {
            Layer::Building => 0,
            Layer::Rooms => 1,
            Layer::Objects => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: usize,
    pub layer: Layer,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subcategory: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<Vec<f64>>,
}

impl Node {
    pub fn new(id: usize, layer: Layer, label: impl Into<String>) -> Self {
        Self {
            id,
            layer,
            label: label.into(),
            subcategory: None,
            gt: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGraph {
    pub nodes: Vec<Node>,
    /// Directed `(parent, child)` containment edges.
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    IdNotDense { position: usize, id: usize },
    NoRoot,
    MultipleRoots(Vec<usize>),
    DanglingEdge { parent: usize, child: usize },
    LayerSkip { parent: usize, child: usize },
    InvertedEdge { parent: usize, child: usize },
    MultipleParents { child: usize },
    Orphan(usize),
    LabelLayerMismatch { node: usize },
    GroundTruthNotNormalized { node: usize },
    GroundTruthOnNonObject { node: usize },
    UnknownLabel { node: usize, label: String },
    GroundTruthLength { node: usize, expected: usize, got: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::IdNotDense { position, id } => {
                write!(f, "node at position {position} has id {id}; ids must be dense")
            }
            Violation::NoRoot => write!(f, "no building node"),
            Violation::MultipleRoots(ids) => write!(f, "multiple roots: building nodes {ids:?}"),
            Violation::DanglingEdge { parent, child } => {
                write!(f, "edge ({parent}, {child}) references a missing node")
            }
            Violation::LayerSkip { parent, child } => {
                write!(f, "layer skip: edge ({parent}, {child}) jumps over a layer")
            }
            Violation::InvertedEdge { parent, child } => {
                write!(f, "inverted edge ({parent}, {child}): child is not below parent")
            }
            Violation::MultipleParents { child } => write!(f, "node {child} has multiple parents"),
            Violation::Orphan(id) => write!(f, "orphan node {id} has no parent"),
            Violation::LabelLayerMismatch { node } => {
                write!(f, "node {node} label does not match its layer")
            }
            Violation::GroundTruthNotNormalized { node } => {
                write!(f, "node {node} ground truth is not a normalized distribution")
            }
            Violation::GroundTruthOnNonObject { node } => {
                write!(f, "node {node} carries ground truth but is not an object")
            }
            Violation::UnknownLabel { node, label } => {
                write!(f, "node {node} has unknown label `{label}`")
            }
            Violation::GroundTruthLength {
                node,
                expected,
                got,
            } => write!(
                f,
                "node {node} ground truth has length {got}, its class group has {expected}"
            ),
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown label `{label}` on node {node}")]
    UnknownLabel { node: usize, label: String },
    #[error("{origin}:{line}:{column}: malformed record: {message}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{origin}: {source}")]
    Io {
        origin: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid graph: {}", join(.0))]
    Invalid(Vec<Violation>),
}

fn join(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl SceneGraph {
    pub fn node(&self, id: usize) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Structural checks; pass an ontology to also check labels and ground
    /// truth lengths against it.
    pub fn validate(&self, ontology: Option<&Ontology>) -> Vec<Violation> {
        let mut out = Vec::new();
        for (position, node) in self.nodes.iter().enumerate() {
            if node.id != position {
                out.push(Violation::IdNotDense {
                    position,
                    id: node.id,
                });
            }
        }
        if !out.is_empty() {
            return out;
        }

        let roots: Vec<usize> = self
            .nodes
            .iter()
            .filter(|n| n.layer == Layer::Building)
            .map(|n| n.id)
            .collect();
        match roots.len() {
            0 => out.push(Violation::NoRoot),
            1 => {}
            _ => out.push(Violation::MultipleRoots(roots)),
        }

        let mut parents = vec![0usize; self.nodes.len()];
        for &(parent, child) in &self.edges {
            let (Some(p), Some(c)) = (self.node(parent), self.node(child)) else {
                out.push(Violation::DanglingEdge { parent, child });
                continue;
            };
            parents[child] += 1;
            let (dp, dc) = (p.layer.depth(), c.layer.depth());
            if dc <= dp {
                out.push(Violation::InvertedEdge { parent, child });
            } else if dc > dp + 1 {
                out.push(Violation::LayerSkip { parent, child });
            }
        }
        for node in &self.nodes {
            match (node.layer, parents[node.id]) {
                (Layer::Building, 0) => {}
                (_, 0) => out.push(Violation::Orphan(node.id)),
                (_, 1) => {}
                _ => out.push(Violation::MultipleParents { child: node.id }),
            }
            let label_ok = match node.layer {
                Layer::Building => node.label == BUILDING_LABEL,
                Layer::Rooms => node.label == ROOM_LABEL,
                Layer::Objects => node.label != ROOM_LABEL && node.label != BUILDING_LABEL,
            };
            if !label_ok {
                out.push(Violation::LabelLayerMismatch { node: node.id });
            }
            if let Some(gt) = &node.gt {
                if node.layer != Layer::Objects {
                    out.push(Violation::GroundTruthOnNonObject { node: node.id });
                }
                let sum: f64 = gt.iter().sum();
                if gt.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    out.push(Violation::GroundTruthNotNormalized { node: node.id });
                }
            }
            if let Some(ontology) = ontology {
                match ontology.index_of(&node.label) {
                    None => out.push(Violation::UnknownLabel {
                        node: node.id,
                        label: node.label.clone(),
                    }),
                    Some(class) => {
                        if let Some(gt) = &node.gt {
                            let expected = ontology.slot_range_at(class).map_or(0, |r| r.len());
                            if gt.len() != expected {
                                out.push(Violation::GroundTruthLength {
                                    node: node.id,
                                    expected,
                                    got: gt.len(),
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn is_valid(&self, ontology: Option<&Ontology>) -> bool {
        self.validate(ontology).is_empty()
    }

    /// One-hot rows over the ontology vocabulary, in node order.
    pub fn encode_features(&self, ontology: &Ontology) -> Result<Matrix, GraphError> {
        let mut m = Matrix::zeros(self.nodes.len(), ontology.vocab_size());
        for (row, node) in self.nodes.iter().enumerate() {
            let col = ontology
                .index_of(&node.label)
                .ok_or_else(|| GraphError::UnknownLabel {
                    node: node.id,
                    label: node.label.clone(),
                })?;
            m[(row, col)] = 1.0;
        }
        Ok(m)
    }

    /// Parent of every node (`None` for the root).
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.nodes.len()];
        for &(p, c) in &self.edges {
            if c < parent.len() {
                parent[c] = Some(p);
            }
        }
        parent
    }

    /// Children of every node, in edge order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut children = vec![Vec::new(); self.nodes.len()];
        for &(p, c) in &self.edges {
            if p < children.len() {
                children[p].push(c);
            }
        }
        children
    }

    /// The room containing each object node.
    pub fn room_of(&self, id: usize) -> Option<usize> {
        let parent = self.parents()[id]?;
        (self.nodes[parent].layer == Layer::Rooms).then_some(parent)
    }

    /// Labels present in a room: the room label plus its objects' labels.
    pub fn room_labels(&self, room: usize) -> BTreeSet<&str> {
        let mut labels = BTreeSet::new();
        labels.insert(self.nodes[room].label.as_str());
        for &(p, c) in &self.edges {
            if p == room {
                labels.insert(self.nodes[c].label.as_str());
            }
        }
        labels
    }

    pub fn object_ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.layer == Layer::Objects)
            .map(|n| n.id)
            .collect()
    }

    pub fn count_layer(&self, layer: Layer) -> usize {
        self.nodes.iter().filter(|n| n.layer == layer).count()
    }

    /// Removes ground truth from every node, returning it as a target table.
    pub fn strip_ground_truth(&self) -> (SceneGraph, BTreeMap<usize, Vec<f64>>) {
        let mut graph = self.clone();
        let mut targets = BTreeMap::new();
        for node in &mut graph.nodes {
            node.subcategory = None;
            if let Some(gt) = node.gt.take() {
                targets.insert(node.id, gt);
            }
        }
        (graph, targets)
    }

    /// Drops the given nodes (and their incident edges) and renumbers the
    /// survivors densely, preserving order.
    pub fn without_nodes(&self, removed: &BTreeSet<usize>) -> SceneGraph {
        let mut remap = vec![None; self.nodes.len()];
        let mut nodes = Vec::with_capacity(self.nodes.len() - removed.len().min(self.nodes.len()));
        for node in &self.nodes {
            if removed.contains(&node.id) {
                continue;
            }
            remap[node.id] = Some(nodes.len());
            let mut kept = node.clone();
            kept.id = nodes.len();
            nodes.push(kept);
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|&(p, c)| Some((remap[p]?, remap[c]?)))
            .collect();
        SceneGraph { nodes, edges }
    }

    /// Reorders nodes so that new position `i` holds old node `order[i]`.
    /// `order` must be a permutation of `0..len`.
    pub fn permuted(&self, order: &[usize]) -> SceneGraph {
        assert_eq!(order.len(), self.nodes.len());
        let mut new_id = vec![usize::MAX; order.len()];
        for (new, &old) in order.iter().enumerate() {
            new_id[old] = new;
        }
        let nodes = order
            .iter()
            .enumerate()
            .map(|(new, &old)| {
                let mut n = self.nodes[old].clone();
                n.id = new;
                n
            })
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|&(p, c)| (new_id[p], new_id[c]))
            .collect();
        SceneGraph { nodes, edges }
    }

    /// Canonical single-line JSON encoding.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("scene graph serializes")
    }

    pub fn from_line(line: &str) -> Result<SceneGraph, GraphError> {
        parse_line(line, "<record>", 1)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SceneGraph, GraphError> {
        let path = path.as_ref();
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io {
            origin: origin.clone(),
            source,
        })?;
        let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        parse_line(line, &origin, 1)
    }
}

fn parse_line<T: serde::de::DeserializeOwned>(
    line: &str,
    origin: &str,
    line_no: usize,
) -> Result<T, GraphError> {
    serde_json::from_str(line).map_err(|e| GraphError::Parse {
        origin: origin.to_string(),
        line: line_no,
        column: e.column(),
        message: e.to_string(),
    })
}

/// One corpus line: a graph plus its provenance in the augmentation series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    /// Index of the ground-truth graph this record derives from.
    pub base: usize,
    /// Number of object nodes deleted from the base graph (0 for the base).
    pub deleted: usize,
    pub graph: SceneGraph,
}

pub fn corpus_to_string(records: &[CorpusRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[CorpusRecord]) -> Result<(), GraphError> {
    let path = path.as_ref();
    let io = |source| GraphError::Io {
        origin: path.display().to_string(),
        source,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    file.write_all(corpus_to_string(records).as_bytes()).map_err(io)?;
    file.flush().map_err(io)
}

pub fn parse_corpus(text: &str, origin: &str) -> Result<Vec<CorpusRecord>, GraphError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, origin, i + 1))
        .collect()
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>, GraphError> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| GraphError::Io {
        origin: origin.clone(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| GraphError::Io {
            origin: origin.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(&line, &origin, i + 1)?);
    }
    Ok(records)
}
