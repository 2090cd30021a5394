//! Random scene graphs for property checks.

use ceci_core::ontology::{BUILDING_LABEL, ROOM_LABEL};
use ceci_core::{Layer, Node, Ontology, SceneGraph};
use rand::seq::SliceRandom;
use rand::Rng;

/// A building with 1..=4 rooms and `objects` object nodes spread across
/// them, labelled uniformly from the ontology's object classes.
pub fn random_graph(ontology: &Ontology, objects: usize, rng: &mut impl Rng) -> SceneGraph {
    let labels: Vec<&str> = ontology
        .labels()
        .filter(|l| *l != ROOM_LABEL && *l != BUILDING_LABEL)
        .collect();
    let mut g = SceneGraph::default();
    g.nodes.push(Node::new(0, Layer::Building, BUILDING_LABEL));
    let rooms: Vec<usize> = (0..rng.gen_range(1..=4)).map(|i| i + 1).collect();
    for &r in &rooms {
        g.nodes.push(Node::new(r, Layer::Rooms, ROOM_LABEL));
        g.edges.push((0, r));
    }
    for _ in 0..objects {
        let id = g.nodes.len();
        let label = *labels.choose(rng).expect("object classes");
        let mut node = Node::new(id, Layer::Objects, label);
        let class = ontology.class(label).expect("known label");
        if let Some(sub) = class.subcategories.choose(rng) {
            node.subcategory = Some(sub.name.clone());
            node.gt = Some(sub.affordance.clone());
        }
        g.nodes.push(node);
        g.edges.push((*rooms.choose(rng).expect("rooms"), id));
    }
    g
}

/// Uniformly random permutation of node positions.
pub fn random_order(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}
