//! The CECI network: `depth` graph convolutions, each followed by batch
//! normalization, ReLU and dropout, then a linear projection to every
//! affordance slot and a softmax inside each node's slot group.
//!
//! # Checkpoint layout
//!
//! All integers are little-endian.
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `CECICKPT`                          |
//! | 8      | 4    | format version (`u32`, currently 1)       |
//! | 12     | 4    | config length `L` (`u32`)                 |
//! | 16     | L    | config as compact JSON, UTF-8             |
//! | 16+L   | 4    | vocabulary size (`u32`)                   |
//! | 20+L   | 4    | slot count (`u32`)                        |
//! | 24+L   | 4    | tensor count `T` (`u32`)                  |
//! | 28+L   | …    | `T` tensors: rows `u32`, cols `u32`, then `rows·cols` `f64` row-major |
//!
//! Tensors appear per block as conv weight, batchnorm gamma, beta, running
//! mean, running variance (all `1×hidden` except the weight), followed by
//! the head weight and bias. Nothing follows the last tensor.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{derive_seed, Dataset, Example, Split};
use crate::ontology::Ontology;
use crate::scene_graph::{GraphError, SceneGraph};
use crate::tensor::{
    group_softmax, masked_mse, symmetrize, AdamConfig, AdamState, BatchNorm, Dropout, GcnConv,
    GradCheckable, GroupSoftmax, Linear, Matrix, Mode, NormalizedAdjacency, Param, Relu,
    SlotRanges, TensorError,
};

const MAGIC: &[u8; 8] = b"CECICKPT";
const VERSION: usize = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty split: no {0} examples")]
    EmptySplit(&'static str),
    #[error("node {node}: target has {got} entries, class `{class}` owns {expected} slots")]
    TargetLength {
        node: usize,
        class: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite loss at epoch {epoch}; last finite model retained")]
    NonFiniteLoss {
        epoch: usize,
        last_finite: Box<Model>,
    },
    #[error("model expects {vocab} labels and {slots} slots, ontology has {got_vocab} and {got_slots}")]
    OntologyMismatch {
        vocab: usize,
        slots: usize,
        got_vocab: usize,
        got_slots: usize,
    },
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CeciConfig {
    pub depth: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for CeciConfig {
    fn default() -> Self {
        Self {
            depth: 9,
            hidden: 64,
            dropout: 0.5,
            epochs: 5000,
            batch_size: 50,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl CeciConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let config: Self = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        let o = &self.optimizer;
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.hidden == 0 {
            return bad("hidden width must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(o.learning_rate.is_finite() && o.learning_rate >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(o.eps.is_finite() && o.eps > 0.0) {
            return bad("adam eps must be positive");
        }
        if !(o.decay.is_finite() && o.decay >= 0.0) {
            return bad("decay must be finite and non-negative");
        }
        Ok(())
    }
}

/// Node id → distribution over the node's own slot group.
pub type Prediction = BTreeMap<usize, Vec<f64>>;

/// Several graphs stacked into one disconnected graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub adjacency: NormalizedAdjacency,
    pub features: Matrix,
    /// Ground truth scattered into each row's slot range (zeros elsewhere).
    pub targets: Matrix,
    /// Slot range of each row's class, for the output softmax.
    pub groups: SlotRanges,
    /// Slots that carry a target and enter the loss.
    pub mask: SlotRanges,
    /// Row offset of each graph; `offsets[g]..offsets[g + 1]`.
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn graph_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn rows_of(&self, graph: usize) -> Range<usize> {
        self.offsets[graph]..self.offsets[graph + 1]
    }

    pub fn masked_slots(&self) -> usize {
        self.mask.iter().flatten().map(|r| r.len()).sum()
    }
}

/// Disjoint union of the graphs with symmetrized edges. Rows are the
/// graphs' nodes in order; no targets.
pub fn batch_graphs(graphs: &[&SceneGraph], ontology: &Ontology) -> Result<Batch, ModelError> {
    let items: Vec<(&SceneGraph, Option<&BTreeMap<usize, Vec<f64>>>)> =
        graphs.iter().map(|&g| (g, None)).collect();
    build_batch(&items, ontology)
}

/// Like [`batch_graphs`], with targets and loss mask from the examples.
pub fn batch_examples(examples: &[&Example], ontology: &Ontology) -> Result<Batch, ModelError> {
    let items: Vec<_> = examples
        .iter()
        .map(|e| (&e.input, Some(&e.targets)))
        .collect();
    build_batch(&items, ontology)
}

fn build_batch(
    items: &[(&SceneGraph, Option<&BTreeMap<usize, Vec<f64>>>)],
    ontology: &Ontology,
) -> Result<Batch, ModelError> {
    let total: usize = items.iter().map(|(g, _)| g.nodes.len()).sum();
    let vocab = ontology.vocab_size();
    let slots = ontology.slot_count();
    let mut features = Matrix::zeros(total, vocab);
    let mut targets = Matrix::zeros(total, slots);
    let mut groups = Vec::with_capacity(total);
    let mut mask = Vec::with_capacity(total);
    let mut edges = Vec::new();
    let mut offsets = vec![0];
    let mut offset = 0;
    for (graph, table) in items {
        for (i, node) in graph.nodes.iter().enumerate() {
            let row = offset + i;
            let class = ontology
                .index_of(&node.label)
                .ok_or_else(|| GraphError::UnknownLabel {
                    node: node.id,
                    label: node.label.clone(),
                })?;
            features[(row, class)] = 1.0;
            let range = ontology.slot_range_at(class);
            let target = range
                .as_ref()
                .and_then(|_| table.and_then(|t| t.get(&node.id)));
            if let (Some(range), Some(target)) = (&range, target) {
                if target.len() != range.len() {
                    return Err(ModelError::TargetLength {
                        node: node.id,
                        class: node.label.clone(),
                        expected: range.len(),
                        got: target.len(),
                    });
                }
                targets.row_mut(row)[range.clone()].copy_from_slice(target);
            }
            mask.push(target.and(range.clone()));
            groups.push(range);
        }
        edges.extend(graph.edges.iter().map(|&(u, v)| (u + offset, v + offset)));
        offset += graph.nodes.len();
        offsets.push(offset);
    }
    let adjacency = NormalizedAdjacency::new(&symmetrize(&edges), total)?;
    Ok(Batch {
        adjacency,
        features,
        targets,
        groups,
        mask,
        offsets,
    })
}

/// Where train-mode dropout masks come from.
enum DropoutSource<'a> {
    Sample(&'a mut ChaCha8Rng),
    Fixed(&'a [Matrix]),
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv: GcnConv,
    norm: BatchNorm,
    relu: Relu,
    dropout: Dropout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: CeciConfig,
    vocab: usize,
    slots: usize,
    blocks: Vec<Block>,
    head: Linear,
    softmax: GroupSoftmax,
}

impl Model {
    /// Glorot-initialized weights drawn from a stream derived from the
    /// config seed.
    pub fn new(config: CeciConfig, ontology: &Ontology) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0));
        let vocab = ontology.vocab_size();
        let slots = ontology.slot_count();
        let mut blocks = Vec::with_capacity(config.depth);
        let mut width = vocab;
        for _ in 0..config.depth {
            blocks.push(Block {
                conv: GcnConv::init(width, config.hidden, &mut rng),
                norm: BatchNorm::new(config.hidden),
                relu: Relu::new(),
                dropout: Dropout::new(config.dropout)?,
            });
            width = config.hidden;
        }
        let head = Linear::init(width, slots, &mut rng);
        Ok(Self {
            config,
            vocab,
            slots,
            blocks,
            head,
            softmax: GroupSoftmax::new(),
        })
    }

    pub fn config(&self) -> &CeciConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn slot_count(&self) -> usize {
        self.slots
    }

    pub fn check_ontology(&self, ontology: &Ontology) -> Result<(), ModelError> {
        if ontology.vocab_size() != self.vocab || ontology.slot_count() != self.slots {
            return Err(ModelError::OntologyMismatch {
                vocab: self.vocab,
                slots: self.slots,
                got_vocab: ontology.vocab_size(),
                got_slots: ontology.slot_count(),
            });
        }
        Ok(())
    }

    /// Trainable parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::with_capacity(3 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            out.push(&mut b.conv.weight);
            out.push(&mut b.norm.gamma);
            out.push(&mut b.norm.beta);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::with_capacity(3 * self.blocks.len() + 2);
        for b in &self.blocks {
            out.extend([&b.conv.weight, &b.norm.gamma, &b.norm.beta]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    /// Copy of the weights and running statistics without cached
    /// activations.
    pub fn detached(&self) -> Model {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let mut norm = BatchNorm::new(b.norm.channels());
                norm.gamma = Param::new(b.norm.gamma.value.clone());
                norm.beta = Param::new(b.norm.beta.value.clone());
                norm.running_mean = b.norm.running_mean.clone();
                norm.running_var = b.norm.running_var.clone();
                Block {
                    conv: GcnConv::new(b.conv.weight.value.clone()),
                    norm,
                    relu: Relu::new(),
                    dropout: Dropout::new(b.dropout.p()).expect("probability already validated"),
                }
            })
            .collect();
        Model {
            config: self.config.clone(),
            vocab: self.vocab,
            slots: self.slots,
            blocks,
            head: Linear::new(self.head.weight.value.clone(), self.head.bias.value.clone()),
            softmax: GroupSoftmax::new(),
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.features.cols() != self.vocab || batch.targets.cols() != self.slots {
            return Err(TensorError::ShapeMismatch {
                op: "model input",
                left: (batch.features.cols(), batch.targets.cols()),
                right: (self.vocab, self.slots),
            }
            .into());
        }
        Ok(())
    }

    fn forward_cached(
        &mut self,
        batch: &Batch,
        mode: Mode,
        mut dropout: DropoutSource<'_>,
    ) -> Result<Matrix, ModelError> {
        self.check_batch(batch)?;
        let mut h = batch.features.clone();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            h = block.conv.forward(&batch.adjacency, &h)?;
            h = block.norm.forward(&h, mode)?;
            h = block.relu.forward(&h);
            h = match (&mut dropout, mode) {
                (_, Mode::Eval) => h,
                (DropoutSource::Sample(rng), Mode::Train) => block.dropout.forward(&h, mode, *rng),
                (DropoutSource::Fixed(masks), Mode::Train) => {
                    block.dropout.forward_with_mask(&h, masks[i].clone())?
                }
            };
        }
        let logits = self.head.forward(&h)?;
        Ok(self.softmax.forward(&logits, &batch.groups)?)
    }

    /// Train-mode forward pass with sampled dropout; caches activations for
    /// [`Model::backward`] and updates batchnorm running statistics.
    pub fn forward_train(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<Matrix, ModelError> {
        self.forward_cached(batch, Mode::Train, DropoutSource::Sample(rng))
    }

    /// Eval-mode forward pass (running statistics, no dropout). Rows of
    /// classes without a group are all zero.
    pub fn infer(&self, batch: &Batch) -> Result<Matrix, ModelError> {
        self.check_batch(batch)?;
        let mut h = batch.features.clone();
        for block in &self.blocks {
            h = block.conv.apply(&batch.adjacency, &h)?;
            h = block.norm.apply_eval(&h)?;
            h = h.map(|v| v.max(0.0));
        }
        let logits = self.head.apply(&h)?;
        Ok(group_softmax(&logits, &batch.groups)?)
    }

    /// Backpropagates `∂L/∂output` from the last cached forward pass into
    /// every parameter's gradient.
    pub fn backward(&mut self, adjacency: &NormalizedAdjacency, grad: &Matrix) -> Result<(), ModelError> {
        let g = self.softmax.backward(grad)?;
        let mut g = self.head.backward(&g)?;
        for block in self.blocks.iter_mut().rev() {
            g = block.dropout.backward(&g)?;
            g = block.relu.backward(&g)?;
            g = block.norm.backward(&g)?;
            g = block.conv.backward(adjacency, &g)?;
        }
        Ok(())
    }

    fn relu_patterns(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.relu.pattern().unwrap_or(&[]).iter().copied())
            .collect()
    }

    /// Eval-mode predictions for one graph.
    pub fn predict(&self, ontology: &Ontology, graph: &SceneGraph) -> Result<Prediction, ModelError> {
        self.check_ontology(ontology)?;
        let batch = batch_graphs(&[graph], ontology)?;
        let out = self.infer(&batch)?;
        Ok(split_rows(&out, &batch, 0, graph))
    }

    /// [`Model::predict`] over many graphs in parallel.
    pub fn predict_many(
        &self,
        ontology: &Ontology,
        graphs: &[&SceneGraph],
    ) -> Result<Vec<Prediction>, ModelError> {
        graphs.par_iter().map(|g| self.predict(ontology, g)).collect()
    }

    /// Masked MSE of eval-mode predictions, accumulated over batches of
    /// `batch_size` examples.
    pub fn evaluate_loss(
        &self,
        ontology: &Ontology,
        examples: &[&Example],
        batch_size: usize,
    ) -> Result<f64, ModelError> {
        let mut total = 0.0;
        let mut count = 0;
        for chunk in examples.chunks(batch_size.max(1)) {
            let batch = batch_examples(chunk, ontology)?;
            let out = self.infer(&batch)?;
            let (loss, _) = masked_mse(&out, &batch.targets, &batch.mask)?;
            let n = batch.masked_slots();
            total += loss * n as f64;
            count += n;
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, config.len());
        out.extend_from_slice(&config);
        put_u32(&mut out, self.vocab);
        put_u32(&mut out, self.slots);
        let mut tensors: Vec<Matrix> = Vec::new();
        for b in &self.blocks {
            tensors.push(b.conv.weight.value.clone());
            tensors.push(b.norm.gamma.value.clone());
            tensors.push(b.norm.beta.value.clone());
            tensors.push(row_matrix(&b.norm.running_mean));
            tensors.push(row_matrix(&b.norm.running_var));
        }
        tensors.push(self.head.weight.value.clone());
        tensors.push(self.head.bias.value.clone());
        put_u32(&mut out, tensors.len());
        for t in &tensors {
            put_u32(&mut out, t.rows());
            put_u32(&mut out, t.cols());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let len = r.u32()?;
        let config: CeciConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| corrupt(&format!("config: {e}")))?;
        config
            .validate()
            .map_err(|e| corrupt(&e.to_string()))?;
        let vocab = r.u32()?;
        let slots = r.u32()?;
        let count = r.u32()?;
        if count != 5 * config.depth + 2 {
            return Err(corrupt(&format!("{count} tensors for depth {}", config.depth)));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rows = r.u32()?;
            let cols = r.u32()?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| corrupt("tensor size overflows"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("tensor size overflows"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Matrix::from_vec(rows, cols, data)?);
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }

        let h = config.hidden;
        let expect = |t: &Matrix, shape: (usize, usize), what: &str| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(corrupt(&format!("{what} has shape {:?}, expected {shape:?}", t.shape())))
            }
        };
        let mut it = tensors.into_iter();
        let mut blocks = Vec::with_capacity(config.depth);
        let mut width = vocab;
        for _ in 0..config.depth {
            let w = it.next().expect("count checked");
            expect(&w, (width, h), "conv weight")?;
            let mut norm = BatchNorm::new(h);
            for (slot, what) in [(0, "gamma"), (1, "beta"), (2, "running mean"), (3, "running var")] {
                let t = it.next().expect("count checked");
                expect(&t, (1, h), what)?;
                match slot {
                    0 => norm.gamma = Param::new(t),
                    1 => norm.beta = Param::new(t),
                    2 => norm.running_mean = t.into_vec(),
                    _ => norm.running_var = t.into_vec(),
                }
            }
            blocks.push(Block {
                conv: GcnConv::new(w),
                norm,
                relu: Relu::new(),
                dropout: Dropout::new(config.dropout)?,
            });
            width = h;
        }
        let hw = it.next().expect("count checked");
        expect(&hw, (width, slots), "head weight")?;
        let hb = it.next().expect("count checked");
        expect(&hb, (1, slots), "head bias")?;
        Ok(Self {
            config,
            vocab,
            slots,
            blocks,
            head: Linear::new(hw, hb),
            softmax: GroupSoftmax::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn split_rows(out: &Matrix, batch: &Batch, index: usize, graph: &SceneGraph) -> Prediction {
    let rows = batch.rows_of(index);
    let mut prediction = Prediction::new();
    for (node, row) in graph.nodes.iter().zip(rows) {
        if let Some(range) = &batch.groups[row] {
            prediction.insert(node.id, out.row(row)[range.clone()].to_vec());
        }
    }
    prediction
}

fn row_matrix(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec()).expect("length matches")
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn corrupt(message: &str) -> ModelError {
    ModelError::Checkpoint(message.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation epoch (the last epoch when there is
    /// no validation split).
    pub model: Model,
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
}

/// Trains on the dataset's train split with masked MSE and Adam.
///
/// Training examples are reshuffled every epoch; the last partial batch is
/// kept. Shuffling, dropout and initialization all derive from
/// `config.seed`.
pub fn train(config: &CeciConfig, ontology: &Ontology, dataset: &Dataset) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    let train_set: Vec<&Example> = dataset.in_split(Split::Train).collect();
    if train_set.is_empty() {
        return Err(ModelError::EmptySplit("training"));
    }
    let val_set: Vec<&Example> = dataset.in_split(Split::Val).collect();

    let mut model = Model::new(config.clone(), ontology)?;
    let mut adam = AdamState::new(config.optimizer, &model.params_mut());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=config.epochs {
        let last_finite = model.detached();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(config.batch_size) {
            let examples: Vec<&Example> = chunk.iter().map(|&i| train_set[i]).collect();
            let batch = batch_examples(&examples, ontology)?;
            let out = model.forward_train(&batch, &mut rng)?;
            let (loss, grad) = masked_mse(&out, &batch.targets, &batch.mask)?;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    last_finite: Box::new(last_finite),
                });
            }
            let n = batch.masked_slots();
            total += loss * n as f64;
            count += n;
            model.backward(&batch.adjacency, &grad)?;
            match adam.step(&mut model.params_mut()) {
                Ok(()) => {}
                Err(TensorError::NonFiniteGradient { .. }) => {
                    return Err(ModelError::NonFiniteLoss {
                        epoch,
                        last_finite: Box::new(last_finite),
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
        let train_loss = if count == 0 { 0.0 } else { total / count as f64 };
        let val = if val_set.is_empty() {
            None
        } else {
            let v = model.evaluate_loss(ontology, &val_set, config.batch_size)?;
            if !v.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    last_finite: Box::new(last_finite),
                });
            }
            Some(v)
        };
        history.push(EpochLoss {
            epoch,
            train: train_loss,
            val,
        });
        let score = val.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().map_or(true, |(b, _, _)| score < *b || val.is_none()) {
            best = Some((score, epoch, model.detached()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// Full-model gradient harness: the flattened parameters are the point and
/// the loss is the train-mode masked MSE with dropout held at fixed masks.
pub struct ModelProbe {
    pub model: Model,
    pub batch: Batch,
    masks: Vec<Matrix>,
}

impl ModelProbe {
    /// Dropout masks are sampled once from `seed` and then reused.
    pub fn new(model: Model, batch: Batch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = model.config.dropout;
        let keep = 1.0 / (1.0 - p);
        let rows = batch.features.rows();
        let masks = (0..model.blocks.len())
            .map(|_| {
                let data = (0..rows * model.config.hidden)
                    .map(|_| {
                        if rand::Rng::gen::<f64>(&mut rng) < p {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect();
                Matrix::from_vec(rows, model.config.hidden, data).expect("length matches")
            })
            .collect();
        Self { model, batch, masks }
    }

    fn run(&mut self) -> (f64, Matrix) {
        let out = self
            .model
            .forward_cached(&self.batch, Mode::Train, DropoutSource::Fixed(&self.masks))
            .expect("probe forward");
        masked_mse(&out, &self.batch.targets, &self.batch.mask).expect("probe loss")
    }
}

impl GradCheckable for ModelProbe {
    fn point(&self) -> Vec<f64> {
        self.model
            .params()
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    fn set_point(&mut self, x: &[f64]) {
        let mut at = 0;
        for p in self.model.params_mut() {
            let n = p.value.data().len();
            p.value.data_mut().copy_from_slice(&x[at..at + n]);
            at += n;
        }
    }

    fn loss(&mut self) -> f64 {
        self.run().0
    }

    fn gradient(&mut self) -> Vec<f64> {
        let (_, grad) = self.run();
        self.model
            .backward(&self.batch.adjacency, &grad)
            .expect("probe backward");
        self.model
            .params()
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    fn regime(&self) -> Option<Vec<bool>> {
        Some(self.model.relu_patterns())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, split, GeneratorConfig};
    use crate::tensor::grad_check;

    fn small_config() -> CeciConfig {
        CeciConfig {
            depth: 2,
            hidden: 8,
            dropout: 0.0,
            epochs: 3,
            batch_size: 4,
            seed: 5,
            ..CeciConfig::default()
        }
    }

    fn desk_dataset(bases: usize, seed: u64) -> (Ontology, Dataset) {
        let ontology = Ontology::builtin_desk();
        let mut gen = GeneratorConfig::builtin_desk();
        gen.corpus_size = bases;
        let corpus = generate_corpus(&gen, &ontology, seed).unwrap();
        let mut data = Dataset::from_corpus(&corpus, &ontology).unwrap();
        split(&mut data, [0.8, 0.1, 0.1], seed).unwrap();
        (ontology, data)
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = CeciConfig::from_toml_str("").unwrap();
        assert_eq!(c.depth, 9);
        assert_eq!(c.hidden, 64);
        assert_eq!(c.epochs, 5000);
        assert_eq!(c.batch_size, 50);
        let c = CeciConfig::from_toml_str("depth = 4\n[optimizer]\nlearning_rate = 0.5\n").unwrap();
        assert_eq!(c.optimizer.learning_rate, 0.5);
        assert_eq!(c.optimizer.beta2, 0.999);
        assert!(CeciConfig::from_toml_str("depth = 0").is_err());
        assert!(CeciConfig::from_toml_str("dropout = 1.0").is_err());
        assert!(CeciConfig::from_toml_str("batch_size = 0").is_err());
        assert!(CeciConfig::from_toml_str("widht = 3").is_err());
    }

    #[test]
    fn batch_is_disjoint_union() {
        let (ontology, data) = desk_dataset(2, 1);
        let a = &data.examples[0];
        let b = data.examples.iter().find(|e| e.base != a.base).unwrap();
        let batch = batch_examples(&[a, b], &ontology).unwrap();
        let na = a.input.nodes.len();
        assert_eq!(batch.offsets, vec![0, na, na + b.input.nodes.len()]);
        for u in 0..na {
            for v in na..batch.offsets[2] {
                assert_eq!(batch.adjacency.get(u, v), 0.0);
            }
        }
        let single = batch_examples(&[a], &ontology).unwrap();
        for u in 0..na {
            for v in 0..na {
                assert_eq!(single.adjacency.get(u, v), batch.adjacency.get(u, v));
            }
        }
        assert_eq!(batch.masked_slots(), 3 * (a.targets.len() + b.targets.len()));
    }

    #[test]
    fn untrained_outputs_are_distributions() {
        let (ontology, data) = desk_dataset(3, 2);
        let model = Model::new(small_config(), &ontology).unwrap();
        for e in &data.examples {
            let p = model.predict(&ontology, &e.input).unwrap();
            assert_eq!(p.len(), e.targets.len());
            for v in p.values() {
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(v.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn infer_matches_cached_eval_forward() {
        let (ontology, data) = desk_dataset(3, 3);
        let mut model = Model::new(small_config(), &ontology).unwrap();
        let refs: Vec<&Example> = data.examples.iter().collect();
        let batch = batch_examples(&refs, &ontology).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        model.forward_train(&batch, &mut rng).unwrap();
        let cached = model
            .forward_cached(&batch, Mode::Eval, DropoutSource::Sample(&mut rng))
            .unwrap();
        assert_eq!(model.infer(&batch).unwrap(), cached);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (ontology, data) = desk_dataset(10, 4);
        let outcome = train(&small_config(), &ontology, &data).unwrap();
        let bytes = outcome.model.to_bytes();
        assert_eq!(&bytes[..8], b"CECICKPT");
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let g = &data.examples[0].input;
        assert_eq!(
            back.predict(&ontology, g).unwrap(),
            outcome.model.predict(&ontology, g).unwrap()
        );
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let ontology = Ontology::builtin_desk();
        let bytes = Model::new(small_config(), &ontology).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::from_bytes(&bad), Err(ModelError::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Model::from_bytes(&bad), Err(ModelError::Checkpoint(_))));
        assert!(Model::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Model::from_bytes(&long).is_err());
    }

    #[test]
    fn empty_training_split_is_an_error() {
        let ontology = Ontology::builtin_desk();
        let err = train(&small_config(), &ontology, &Dataset::default()).unwrap_err();
        assert!(err.to_string().contains("empty split"));
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let (ontology, data) = desk_dataset(6, 5);
        let mut config = small_config();
        config.optimizer.learning_rate = 0.0;
        config.optimizer.decay = 0.0;
        config.batch_size = 1000;
        config.epochs = 4;
        let outcome = train(&config, &ontology, &data).unwrap();
        let first = outcome.history[0].train;
        for h in &outcome.history {
            assert!((h.train - first).abs() < 1e-12, "{:?}", outcome.history);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (ontology, data) = desk_dataset(8, 6);
        let mut config = small_config();
        config.dropout = 0.3;
        let a = train(&config, &ontology, &data).unwrap();
        let b = train(&config, &ontology, &data).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    }

    #[test]
    fn best_checkpoint_is_no_worse_than_first_epoch() {
        let (ontology, data) = desk_dataset(20, 7);
        let outcome = train(&small_config(), &ontology, &data).unwrap();
        let best = outcome.history[outcome.best_epoch - 1].val.unwrap();
        assert!(best <= outcome.history[0].val.unwrap());
    }

    #[test]
    fn model_gradient_matches_finite_differences() {
        let (ontology, data) = desk_dataset(2, 8);
        let mut config = small_config();
        config.dropout = 0.25;
        config.hidden = 5;
        let model = Model::new(config, &ontology).unwrap();
        let refs: Vec<&Example> = data.examples.iter().take(2).collect();
        let batch = batch_examples(&refs, &ontology).unwrap();
        let mut probe = ModelProbe::new(model, batch, 3);
        let report = grad_check(&mut probe, 1e-5);
        assert!(report.max_relative_error < 1e-4, "{report:?}");
        assert!(report.checked > report.skipped);
    }
}
