//! Second implementation of the co-occurrence expectation, reading the raw
//! JSON records directly and recounting everything per query. Only handles
//! a single grouped class.

use std::collections::BTreeSet;

use serde_json::Value;

struct Room {
    /// Room label plus every child label.
    labels: BTreeSet<String>,
    /// Ground-truth vectors of the target-class children.
    gts: Vec<Vec<f64>>,
}

pub struct Query {
    pub graph: usize,
    pub node: usize,
    pub distribution: Vec<f64>,
}

fn rooms_of(graphs: &[Value], class: &str) -> Vec<Room> {
    let mut rooms = Vec::new();
    for g in graphs {
        let nodes = g["nodes"].as_array().unwrap();
        let edges = g["edges"].as_array().unwrap();
        for (r, node) in nodes.iter().enumerate() {
            if node["layer"] != "rooms" {
                continue;
            }
            let mut labels = BTreeSet::from([node["label"].as_str().unwrap().to_string()]);
            let mut gts = Vec::new();
            for e in edges {
                if e[0].as_u64().unwrap() as usize != r {
                    continue;
                }
                let child = &nodes[e[1].as_u64().unwrap() as usize];
                let label = child["label"].as_str().unwrap();
                labels.insert(label.to_string());
                if label == class {
                    gts.push(
                        child["gt"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect(),
                    );
                }
            }
            rooms.push(Room { labels, gts });
        }
    }
    rooms
}

/// Predictions for every `class` node in the corpus text (JSON lines of
/// `{base, deleted, graph}` records).
pub fn exhaustive(corpus: &str, class: &str, slots: usize, alpha: f64) -> Vec<Query> {
    let graphs: Vec<Value> = corpus
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["graph"].clone())
        .collect();
    let rooms = rooms_of(&graphs, class);
    let total = rooms.len() as f64;
    let p_b = |b: &str| {
        let n = rooms.iter().filter(|r| r.labels.contains(b)).count() as f64;
        (n + alpha) / (total + 2.0 * alpha)
    };
    let p_ab = |i: usize, b: &str| {
        let mut mass = 0.0;
        for r in rooms.iter().filter(|r| r.labels.contains(b)) {
            if !r.gts.is_empty() {
                mass += r.gts.iter().map(|g| g[i]).sum::<f64>() / r.gts.len() as f64;
            }
        }
        (mass + alpha) / (total + 2.0 * alpha)
    };

    let mut out = Vec::new();
    for (gi, g) in graphs.iter().enumerate() {
        let nodes = g["nodes"].as_array().unwrap();
        let edges = g["edges"].as_array().unwrap();
        for (id, node) in nodes.iter().enumerate() {
            if node["label"] != class {
                continue;
            }
            let room = edges
                .iter()
                .find(|e| e[1].as_u64().unwrap() as usize == id)
                .map(|e| e[0].as_u64().unwrap() as usize)
                .unwrap();
            let mut context = BTreeSet::from([nodes[room]["label"].as_str().unwrap().to_string()]);
            for e in edges {
                let (p, c) = (e[0].as_u64().unwrap() as usize, e[1].as_u64().unwrap() as usize);
                if p == room && c != id {
                    context.insert(nodes[c]["label"].as_str().unwrap().to_string());
                }
            }
            let denominator: f64 = context.iter().map(|b| p_b(b)).product();
            let scores: Vec<f64> = (0..slots)
                .map(|i| context.iter().map(|b| p_ab(i, b)).sum::<f64>() / denominator)
                .collect();
            let sum: f64 = scores.iter().sum();
            out.push(Query {
                graph: gi,
                node: id,
                distribution: scores.iter().map(|s| s / sum).collect(),
            });
        }
    }
    out
}
