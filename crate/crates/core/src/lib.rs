pub mod datagen;
pub mod evaluation;
pub mod metrics;
pub mod model;
pub mod ontology;
pub mod oracle;
pub mod scene_graph;
pub mod tensor;

pub use datagen::{Dataset, Example, GeneratorConfig, Split, SplitManifest};
pub use evaluation::EvalReport;
pub use metrics::{CorrelationMatrix, Moments};
pub use model::{CeciConfig, Model, Prediction};
pub use ontology::Ontology;
pub use oracle::FrequencyTable;
pub use scene_graph::{CorpusRecord, Layer, Node, SceneGraph};
pub use tensor::Matrix;
