use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ceci_core::evaluation::EvalReport;
use ceci_core::oracle::DEFAULT_ALPHA;
use ceci_core::Split;
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;
use crate::stages::{self, OntologyInput, Resource};

/// Pipeline description. Relative paths resolve against the config file's
/// directory; `builtin:<name>` selects a bundled resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub ontology: String,
    pub generator: String,
    pub model: String,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_split")]
    pub eval_split: Split,
    /// Overrides the generator's `corpus_size`.
    #[serde(default)]
    pub bases: Option<usize>,
    #[serde(default)]
    pub out: Option<String>,
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_split() -> Split {
    Split::Test
}

/// File names inside the output directory.
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.jsonl")
    }
    pub fn split(&self) -> PathBuf {
        self.dir.join("split.json")
    }
    pub fn oracle(&self) -> PathBuf {
        self.dir.join("oracle.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
    pub fn correlations(&self) -> PathBuf {
        self.dir.join("correlations.json")
    }
    pub fn heatmap(&self, class: &str, which: &str) -> PathBuf {
        self.dir.join("heatmaps").join(format!("{class}.{which}.csv"))
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("pipeline")
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Runs gen → split → oracle-fit → train → eval → correlate → export-heatmap.
pub fn run(config_path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<(Layout, EvalReport)> {
    let mut config = load_config(config_path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let base = config_path.parent().unwrap_or(Path::new("."));
    let dir = match (out, &config.out) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => base.join(o),
        (None, None) => anyhow::bail!("no output directory: pass --out or set `out` in {}", config_path.display()),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let layout = Layout { dir };
    let resolve = |s: &str| Resource::parse(s).relative_to(base);
    let seed = config.seed;

    let input = OntologyInput::load(resolve(&config.ontology)).context("stage `gen`")?;
    stages::gen(&input, &resolve(&config.generator), config.bases, seed, &layout.corpus())
        .context("stage `gen`")?;
    stages::split(&input, &layout.corpus(), config.fractions, seed, &layout.split()).context("stage `split`")?;
    stages::oracle_fit(&input, &layout.corpus(), &layout.split(), config.alpha, &layout.oracle())
        .context("stage `oracle-fit`")?;
    stages::train(
        &input,
        &layout.corpus(),
        &layout.split(),
        &resolve(&config.model),
        seed,
        &layout.checkpoint(),
    )
    .context("stage `train`")?;
    let report = stages::eval(
        &input,
        &layout.checkpoint(),
        &layout.corpus(),
        &layout.split(),
        config.eval_split,
        Some(&layout.oracle()),
        config.alpha,
        &layout.report(),
    )
    .context("stage `eval`")?;
    let correlations = stages::correlate(
        &input,
        &layout.checkpoint(),
        &layout.corpus(),
        &layout.split(),
        config.eval_split,
        &[],
        &layout.correlations(),
    )
    .context("stage `correlate`")?;
    for m in &correlations {
        for (which, truth) in [("predicted", false), ("truth", true)] {
            stages::export_heatmap(&layout.correlations(), &m.class, truth, &layout.heatmap(&m.class, which))
                .context("stage `export-heatmap`")?;
        }
    }

    let mut manifest = RunManifest::new("pipeline", Some(seed))
        .config(&config)
        .input_file("pipeline config", config_path)?;
    for p in [
        layout.corpus(),
        layout.split(),
        layout.oracle(),
        layout.checkpoint(),
        layout.report(),
        layout.correlations(),
    ] {
        manifest = manifest.output(&p);
    }
    manifest.write_next_to(&layout.manifest())?;
    Ok((layout, report))
}
