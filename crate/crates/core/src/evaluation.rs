//! Scoring predictions against held-out ground truth: per-node distances,
//! their moments, masked MSE, correlation matrices, and the same numbers
//! for reference predictors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{Example, Split};
use crate::metrics::{
    correlation_matrix, energy_distance, frobenius_diff, hm3d_reference, moment_stats,
    observations, wasserstein_1d, CorrelationMatrix, MetricsError, Moments, NodeObservation,
};
use crate::model::Prediction;
use crate::ontology::Ontology;

/// Caveats carried at the top of every report.
pub const NOTES: [&str; 3] = [
    "wasserstein ground metric: affordance slots at integer points 0..n-1 in schema order",
    "correlation entry: mean predicted probability of a slot over target-class nodes whose room contains the column class",
    "reference values come from HM3D with human annotations and are not reproducible on synthetic corpora",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDistance {
    pub example: usize,
    pub base: usize,
    pub deleted: usize,
    pub node: usize,
    pub class: String,
    pub wasserstein: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorScore {
    pub wasserstein: Moments,
    pub energy: Moments,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationComparison {
    pub class: String,
    pub predicted: CorrelationMatrix,
    pub truth: CorrelationMatrix,
    pub frobenius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub wasserstein: Moments,
    pub energy: Moments,
    pub frobenius: BTreeMap<String, f64>,
}

impl Default for ReferenceValues {
    fn default() -> Self {
        Self {
            wasserstein: hm3d_reference::WASSERSTEIN,
            energy: hm3d_reference::ENERGY,
            frobenius: hm3d_reference::FROBENIUS
                .iter()
                .map(|&(k, v)| (k.to_string(), v))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub notes: Vec<String>,
    pub split: Option<Split>,
    pub examples: usize,
    pub model: PredictorScore,
    /// Reference predictors by name.
    pub baselines: BTreeMap<String, PredictorScore>,
    pub correlations: Vec<CorrelationComparison>,
    pub reference: ReferenceValues,
    pub nodes: Vec<NodeDistance>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Plain-text moment table.
    pub fn moment_table(&self) -> String {
        let mut out = format!(
            "{:<24}{:>10}{:>10}{:>10}{:>10}\n",
            "distance", "mean", "variance", "skewness", "kurtosis"
        );
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut row = |name: &str, m: &Moments| {
            out.push_str(&format!(
                "{:<24}{:>10}{:>10}{:>10}{:>10}\n",
                name,
                fmt(m.mean),
                fmt(m.variance),
                fmt(m.skewness),
                fmt(m.kurtosis)
            ));
        };
        row("wasserstein", &self.model.wasserstein);
        row("energy", &self.model.energy);
        row("wasserstein (reference)", &self.reference.wasserstein);
        row("energy (reference)", &self.reference.energy);
        out
    }
}

/// Uniform distribution over every grouped node's slots.
pub fn uniform_predictions(ontology: &Ontology, example: &Example) -> Prediction {
    example
        .targets
        .keys()
        .filter_map(|&id| {
            let class = ontology.index_of(&example.input.nodes[id].label)?;
            let k = ontology.slot_range_at(class)?.len();
            Some((id, vec![1.0 / k as f64; k]))
        })
        .collect()
}

/// Mean ground-truth vector per class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub means: BTreeMap<String, Vec<f64>>,
}

impl ClassPrior {
    pub fn fit<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for e in examples {
            for (&id, gt) in &e.targets {
                let entry = sums
                    .entry(e.input.nodes[id].label.clone())
                    .or_insert_with(|| (vec![0.0; gt.len()], 0));
                entry.0.iter_mut().zip(gt).for_each(|(s, v)| *s += v);
                entry.1 += 1;
            }
        }
        let means = sums
            .into_iter()
            .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        Self { means }
    }

    /// Falls back to uniform for classes unseen at fit time.
    pub fn predict(&self, ontology: &Ontology, example: &Example) -> Prediction {
        let mut out = uniform_predictions(ontology, example);
        for (id, v) in out.iter_mut() {
            if let Some(mean) = self.means.get(&example.input.nodes[*id].label) {
                *v = mean.clone();
            }
        }
        out
    }
}

fn score(
    examples: &[&Example],
    predictions: &[Prediction],
) -> Result<(PredictorScore, Vec<NodeDistance>), MetricsError> {
    let mut nodes = Vec::new();
    let mut sq = 0.0;
    let mut slots = 0usize;
    for (index, (e, pred)) in examples.iter().zip(predictions).enumerate() {
        for (&id, gt) in &e.targets {
            let Some(p) = pred.get(&id) else { continue };
            sq += p.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            slots += gt.len();
            nodes.push(NodeDistance {
                example: index,
                base: e.base,
                deleted: e.deleted,
                node: id,
                class: e.input.nodes[id].label.clone(),
                wasserstein: wasserstein_1d(p, gt)?,
                energy: energy_distance(p, gt)?,
            });
        }
    }
    let w: Vec<f64> = nodes.iter().map(|n| n.wasserstein).collect();
    let en: Vec<f64> = nodes.iter().map(|n| n.energy).collect();
    Ok((
        PredictorScore {
            wasserstein: moment_stats(&w),
            energy: moment_stats(&en),
            mse: if slots == 0 { 0.0 } else { sq / slots as f64 },
        },
        nodes,
    ))
}

fn collect_observations(
    ontology: &Ontology,
    examples: &[&Example],
    tables: &[&BTreeMap<usize, Vec<f64>>],
) -> Vec<NodeObservation> {
    examples
        .iter()
        .zip(tables)
        .flat_map(|(e, t)| observations(ontology, &e.input, |id| t.get(&id).map(Vec::as_slice)))
        .collect()
}

/// Correlation matrices of predictions and ground truth for every grouped
/// class present in the examples.
pub fn compare_correlations(
    ontology: &Ontology,
    examples: &[&Example],
    predictions: &[Prediction],
) -> Result<Vec<CorrelationComparison>, MetricsError> {
    let truth_tables: Vec<&BTreeMap<usize, Vec<f64>>> = examples.iter().map(|e| &e.targets).collect();
    let pred_tables: Vec<&BTreeMap<usize, Vec<f64>>> = predictions.iter().collect();
    let truth_obs = collect_observations(ontology, examples, &truth_tables);
    let pred_obs = collect_observations(ontology, examples, &pred_tables);
    let mut out = Vec::new();
    for class in ontology.group_classes() {
        let index = ontology.index_of(class).expect("group class is in vocabulary");
        if !truth_obs.iter().any(|o| o.class == index) {
            continue;
        }
        let truth = correlation_matrix(ontology, &truth_obs, class)?;
        let predicted = correlation_matrix(ontology, &pred_obs, class)?;
        let frobenius = frobenius_diff(&predicted, &truth)?;
        out.push(CorrelationComparison {
            class: class.to_string(),
            predicted,
            truth,
            frobenius,
        });
    }
    Ok(out)
}

/// Builds the full report. `baselines` pairs a name with that predictor's
/// output for each example, in example order.
pub fn evaluate(
    ontology: &Ontology,
    split: Option<Split>,
    examples: &[&Example],
    predictions: &[Prediction],
    baselines: &[(&str, Vec<Prediction>)],
) -> Result<EvalReport, MetricsError> {
    let (model, nodes) = score(examples, predictions)?;
    let mut scored = BTreeMap::new();
    for (name, preds) in baselines {
        scored.insert(name.to_string(), score(examples, preds)?.0);
    }
    Ok(EvalReport {
        notes: NOTES.iter().map(|s| s.to_string()).collect(),
        split,
        examples: examples.len(),
        model,
        baselines: scored,
        correlations: compare_correlations(ontology, examples, predictions)?,
        reference: ReferenceValues::default(),
        nodes,
    })
}
