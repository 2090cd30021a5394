//! Distances between affordance distributions, moment summaries, and
//! room co-occurrence correlation matrices.
//!
//! Affordance slots are embedded at integer points `0, 1, …, n-1` in group
//! order, which gives both distances their ground metric.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::Ontology;
use crate::scene_graph::{Layer, SceneGraph};

const NORMALIZATION_TOLERANCE: f64 = 1e-6;
const RADICAND_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("distribution lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("distribution is not normalized (sum {sum})")]
    Unnormalized { sum: f64 },
    #[error("negative energy-distance radicand {0}")]
    NegativeRadicand(f64),
    #[error("no nodes of target class `{0}` in the corpus")]
    NoTargetNodes(String),
    #[error("class `{0}` owns no affordance group")]
    NoGroup(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("correlation matrices differ in shape or labels")]
    ShapeMismatch,
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<(), MetricsError> {
    if p.len() != q.len() {
        return Err(MetricsError::LengthMismatch(p.len(), q.len()));
    }
    for d in [p, q] {
        let sum: f64 = d.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE || d.iter().any(|&v| v < -NORMALIZATION_TOLERANCE) {
            return Err(MetricsError::Unnormalized { sum });
        }
    }
    Ok(())
}

/// 1-Wasserstein distance on unit-spaced support: `Σ |CDF_p(i) − CDF_q(i)|`.
pub fn wasserstein_1d(p: &[f64], q: &[f64]) -> Result<f64, MetricsError> {
    check_pair(p, q)?;
    let mut cdf_p = 0.0;
    let mut cdf_q = 0.0;
    let mut total = 0.0;
    for i in 0..p.len().saturating_sub(1) {
        cdf_p += p[i];
        cdf_q += q[i];
        total += (cdf_p - cdf_q).abs();
    }
    Ok(total)
}

fn mean_abs_difference(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        for (j, &qj) in q.iter().enumerate() {
            total += pi * qj * (i as f64 - j as f64).abs();
        }
    }
    total
}

/// Energy distance `sqrt(2E|X−Y| − E|X−X'| − E|Y−Y'|)`, with the
/// expectations evaluated exactly over the discrete supports.
pub fn energy_distance(p: &[f64], q: &[f64]) -> Result<f64, MetricsError> {
    check_pair(p, q)?;
    let cross = mean_abs_difference(p, q) + mean_abs_difference(q, p);
    let radicand = cross - (mean_abs_difference(p, p) + mean_abs_difference(q, q));
    if radicand < -RADICAND_TOLERANCE {
        return Err(MetricsError::NegativeRadicand(radicand));
    }
    Ok(radicand.max(0.0).sqrt())
}

/// Population moments; `None` where the sample set is too small or
/// degenerate for the moment to exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: usize,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    pub skewness: Option<f64>,
    /// Excess (Fisher) kurtosis.
    pub kurtosis: Option<f64>,
}

pub fn moment_stats(samples: &[f64]) -> Moments {
    let n = samples.len();
    let mut m = Moments {
        count: n,
        mean: None,
        variance: None,
        skewness: None,
        kurtosis: None,
    };
    if n == 0 {
        return m;
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    m.mean = Some(mean);
    if n < 2 {
        return m;
    }
    let central = |k: i32| samples.iter().map(|x| (x - mean).powi(k)).sum::<f64>() / nf;
    let m2 = central(2);
    m.variance = Some(m2);
    if n >= 3 && m2 > 0.0 {
        m.skewness = Some(central(3) / m2.powf(1.5));
        m.kurtosis = Some(central(4) / (m2 * m2) - 3.0);
    }
    m
}

/// One node's distribution and the classes present in its room (its own
/// class and the room label included).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeObservation {
    pub class: usize,
    pub room_classes: BTreeSet<usize>,
    pub distribution: Vec<f64>,
}

/// Collects observations for every grouped object node of `graph`; `dist`
/// returns the distribution to record for a node id, if any.
pub fn observations<'a>(
    ontology: &Ontology,
    graph: &SceneGraph,
    mut dist: impl FnMut(usize) -> Option<&'a [f64]>,
) -> Vec<NodeObservation> {
    let mut out = Vec::new();
    for node in graph.nodes.iter().filter(|n| n.layer == Layer::Objects) {
        let Some(class) = ontology.index_of(&node.label) else { continue };
        let Some(d) = dist(node.id) else { continue };
        let Some(room) = graph.room_of(node.id) else { continue };
        let room_classes = graph
            .room_labels(room)
            .into_iter()
            .filter_map(|l| ontology.index_of(l))
            .collect();
        out.push(NodeObservation {
            class,
            room_classes,
            distribution: d.to_vec(),
        });
    }
    out
}

/// Conditional mean affordance of one target class given room
/// co-occurrence with each vocabulary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub class: String,
    /// Row names (the class's affordances).
    pub rows: Vec<String>,
    /// Column names (the full vocabulary).
    pub columns: Vec<String>,
    /// `values[r][c]`; `None` where the class never shares a room with
    /// column `c`.
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn get(&self, row: usize, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|l| l == column)?;
        self.values[row][c]
    }

    /// Sum of the rows in the given column, if defined.
    pub fn column_sum(&self, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|l| l == column)?;
        self.values.iter().map(|row| row[c]).sum()
    }

    /// Comma-separated export: header row of column labels, then one row per
    /// affordance; undefined entries are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("affordance");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (name, row) in self.rows.iter().zip(&self.values) {
            out.push_str(name);
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn correlation_matrix(
    ontology: &Ontology,
    observations: &[NodeObservation],
    target_class: &str,
) -> Result<CorrelationMatrix, MetricsError> {
    let class = ontology
        .index_of(target_class)
        .ok_or_else(|| MetricsError::UnknownClass(target_class.to_string()))?;
    let def = ontology.class_at(class);
    if !def.has_group() {
        return Err(MetricsError::NoGroup(target_class.to_string()));
    }
    let k = def.affordances.len();
    let vocab = ontology.vocab_size();
    let mut sums = vec![vec![0.0; vocab]; k];
    let mut counts = vec![0usize; vocab];
    let mut any = false;
    for obs in observations.iter().filter(|o| o.class == class) {
        any = true;
        for &c in &obs.room_classes {
            counts[c] += 1;
            for (r, v) in obs.distribution.iter().enumerate() {
                sums[r][c] += v;
            }
        }
    }
    if !any {
        return Err(MetricsError::NoTargetNodes(target_class.to_string()));
    }
    let values = sums
        .into_iter()
        .map(|row| {
            row.into_iter()
                .zip(&counts)
                .map(|(s, &n)| (n > 0).then(|| s / n as f64))
                .collect()
        })
        .collect();
    Ok(CorrelationMatrix {
        class: target_class.to_string(),
        rows: def.affordances.clone(),
        columns: ontology.labels().map(str::to_string).collect(),
        values,
    })
}

/// Frobenius norm of `predicted − truth` over entries defined in both.
pub fn frobenius_diff(
    predicted: &CorrelationMatrix,
    truth: &CorrelationMatrix,
) -> Result<f64, MetricsError> {
    if predicted.rows != truth.rows
        || predicted.columns != truth.columns
        || predicted.values.len() != truth.values.len()
    {
        return Err(MetricsError::ShapeMismatch);
    }
    let mut total = 0.0;
    for (a, b) in predicted.values.iter().zip(&truth.values) {
        if a.len() != b.len() {
            return Err(MetricsError::ShapeMismatch);
        }
        for (x, y) in a.iter().zip(b) {
            if let (Some(x), Some(y)) = (x, y) {
                total += (x - y) * (x - y);
            }
        }
    }
    Ok(total.sqrt())
}

/// Distance summary values reported for the HM3D experiments; kept for
/// side-by-side display, not reproducible on synthetic corpora.
pub mod hm3d_reference {
    use super::Moments;

    pub const WASSERSTEIN: Moments = Moments {
        count: 0,
        mean: Some(0.1517),
        variance: Some(0.01371),
        skewness: Some(0.5635),
        kurtosis: Some(-0.9086),
    };

    pub const ENERGY: Moments = Moments {
        count: 0,
        mean: Some(0.3205),
        variance: Some(0.02245),
        skewness: Some(0.0491),
        kurtosis: Some(-0.8878),
    };

    /// Frobenius norm of predicted vs ground-truth correlations per class.
    pub const FROBENIUS: [(&str, f64); 4] = [
        ("chair", 0.0605),
        ("fabric", 0.0606),
        ("container_solids", 0.2062),
        ("container_liquids", 0.1697),
    ];
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap(), 2.0);
    }

    #[test]
    fn energy_examples() {
        assert_eq!(energy_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let d = energy_distance(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn distance_input_errors() {
        assert_eq!(
            wasserstein_1d(&[1.0], &[0.5, 0.5]),
            Err(MetricsError::LengthMismatch(1, 2))
        );
        assert!(matches!(
            energy_distance(&[0.5, 0.4], &[0.5, 0.5]),
            Err(MetricsError::Unnormalized { .. })
        ));
    }

    #[test]
    fn moments_of_constant_samples() {
        let m = moment_stats(&[2.5, 2.5, 2.5]);
        assert_eq!(m.mean, Some(2.5));
        assert_eq!(m.variance, Some(0.0));
        assert_eq!(m.skewness, None);
        assert_eq!(m.kurtosis, None);
    }

    #[test]
    fn moments_of_two_points() {
        let m = moment_stats(&[0.0, 1.0]);
        assert_eq!(m.mean, Some(0.5));
        assert_eq!(m.variance, Some(0.25));
        assert_eq!(m.skewness, None);
        assert_eq!(moment_stats(&[]).mean, None);
        assert_eq!(moment_stats(&[1.0]).variance, None);
    }

    #[test]
    fn moments_of_known_sample() {
        // 1,2,3,4: mean 2.5, m2 1.25, m3 0, m4 2.5625 → kurtosis 1.64 - 3
        let m = moment_stats(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.variance, Some(1.25));
        assert!(m.skewness.unwrap().abs() < 1e-15);
        assert!((m.kurtosis.unwrap() - (2.5625 / 1.5625 - 3.0)).abs() < 1e-12);
        let skewed = moment_stats(&[0.0, 0.0, 0.0, 1.0]);
        assert!(skewed.skewness.unwrap() > 0.0);
    }

    fn showcase() -> Ontology {
        Ontology::from_toml_str(
            r#"
[[class]]
label = "chair"
affordances = ["carried", "dragged", "stepped"]
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

    #[test]
    fn single_chair_fills_cooccurring_columns() {
        let o = showcase();
        let obs = vec![NodeObservation {
            class: 0,
            room_classes: BTreeSet::from([0, 1, 3]),
            distribution: vec![0.0, 1.0, 0.0],
        }];
        let m = correlation_matrix(&o, &obs, "chair").unwrap();
        for label in ["chair", "desk", "room"] {
            assert_eq!(m.get(0, label), Some(0.0));
            assert_eq!(m.get(1, label), Some(1.0));
            assert_eq!(m.get(2, label), Some(0.0));
        }
        assert_eq!(m.get(1, "bed"), None);
        assert_eq!(m.column_sum("chair"), Some(1.0));
        assert_eq!(m.column_sum("building"), None);
        assert!(matches!(
            correlation_matrix(&o, &[], "chair"),
            Err(MetricsError::NoTargetNodes(_))
        ));
        assert!(matches!(
            correlation_matrix(&o, &obs, "desk"),
            Err(MetricsError::NoGroup(_))
        ));
    }

    #[test]
    fn csv_export_marks_missing_entries() {
        let o = showcase();
        let obs = vec![NodeObservation {
            class: 0,
            room_classes: BTreeSet::from([0, 3]),
            distribution: vec![0.25, 0.75, 0.0],
        }];
        let csv = correlation_matrix(&o, &obs, "chair").unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "affordance,chair,desk,bed,room,building");
        assert_eq!(lines[1], "carried,0.25,,,0.25,");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn frobenius_examples() {
        let o = showcase();
        let obs = vec![NodeObservation {
            class: 0,
            room_classes: BTreeSet::from([0, 1, 3]),
            distribution: vec![0.2, 0.5, 0.3],
        }];
        let a = correlation_matrix(&o, &obs, "chair").unwrap();
        assert_eq!(frobenius_diff(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.values[1][1] = Some(1.5);
        assert_eq!(frobenius_diff(&a, &b).unwrap(), 1.0);
        // missing entries on either side are skipped
        b.values[1][1] = None;
        assert_eq!(frobenius_diff(&a, &b).unwrap(), 0.0);
        b.rows.pop();
        assert_eq!(frobenius_diff(&a, &b), Err(MetricsError::ShapeMismatch));
    }
}
