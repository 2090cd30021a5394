//! The `ceci` command: corpus generation, training, evaluation and the
//! end-to-end pipeline.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

pub mod manifest;
pub mod pipeline;
pub mod stages;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Result;
use ceci_core::oracle::DEFAULT_ALPHA;
use ceci_core::Split;
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use stages::{OntologyInput, Resource};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ceci", version, about = "Commonsense affordance estimation on 3D scene graphs")]
pub struct Cli {
    /// Ontology file, or `builtin:desk` / `builtin:default`.
    #[arg(long, global = true, default_value = "builtin:desk")]
    pub ontology: String,
    /// Random seed (required by gen, split and train).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config file for the subcommand (generator, model or pipeline).
    #[arg(long, global = true)]
    pub config: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Predicted,
    Truth,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (JSON lines).
    Gen {
        /// Override the generator's number of base graphs.
        #[arg(long)]
        bases: Option<usize>,
    },
    /// Assign base graphs to train/val/test.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
        fractions: Vec<f64>,
    },
    /// Fit the co-occurrence frequency table on the train split.
    OracleFit {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Predict with a fitted frequency table.
    OraclePredict {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        graph: PathBuf,
    },
    /// Train a model on the train split.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
    },
    /// Predict affordances for one graph.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graph: PathBuf,
    },
    /// Distances, moments, baselines and correlations on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        on: SplitArg,
        /// Fitted frequency table; fitted on the train split when omitted.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Predicted and ground-truth correlation matrices.
    Correlate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        on: SplitArg,
        /// Target classes; all grouped classes when omitted.
        #[arg(long = "class")]
        classes: Vec<String>,
    },
    /// Write one correlation matrix as comma-separated values.
    ExportHeatmap {
        /// Eval report or correlate output.
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "class")]
        class: String,
        #[arg(long, value_enum, default_value = "predicted")]
        which: Which,
    },
    /// Run every stage from a pipeline config into `--out`.
    Pipeline,
    /// Check graphs against the structural rules and the ontology.
    Validate {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

enum Failure {
    Usage(clap::Error),
    Domain(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Domain(e)
    }
}

fn missing(flag: &str, command: &str) -> Failure {
    Failure::Usage(Cli::command().error(
        ErrorKind::MissingRequiredArgument,
        format!("`{command}` requires --{flag}"),
    ))
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(e)) => {
            let _ = e.print();
            EXIT_USAGE
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            EXIT_DOMAIN
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let name = command_name(&cli.command);
    let seed = || cli.seed.ok_or_else(|| missing("seed", name));
    let out = || cli.out.clone().ok_or_else(|| missing("out", name));
    let ontology = || OntologyInput::load(Resource::parse(&cli.ontology)).map_err(Failure::from);
    let config = |default: &str| Resource::parse(cli.config.as_deref().unwrap_or(default));

    match &cli.command {
        Command::Gen { bases } => {
            let (seed, out) = (seed()?, out()?);
            let records = stages::gen(&ontology()?, &config("builtin:desk"), *bases, seed, &out)?;
            eprintln!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Split { corpus, fractions } => {
            let (seed, out) = (seed()?, out()?);
            let f = [fractions[0], fractions[1], fractions[2]];
            let m = stages::split(&ontology()?, corpus, f, seed, &out)?;
            eprintln!(
                "{} train / {} val / {} test base graphs",
                m.train.len(),
                m.val.len(),
                m.test.len()
            );
        }
        Command::OracleFit { corpus, split, alpha } => {
            let out = out()?;
            stages::oracle_fit(&ontology()?, corpus, split, *alpha, &out)?;
        }
        Command::OraclePredict { table, graph } => {
            stages::oracle_predict(&ontology()?, table, graph, cli.out.as_deref())?;
        }
        Command::Train { corpus, split } => {
            let (seed, out) = (seed()?, out()?);
            let summary = stages::train(&ontology()?, corpus, split, &config("builtin:default"), seed, &out)?;
            let best = &summary.history[summary.best_epoch - 1];
            eprintln!(
                "best epoch {} (train {:.6}, val {})",
                best.epoch,
                best.train,
                best.val.map_or("-".to_string(), |v| format!("{v:.6}"))
            );
        }
        Command::Predict { model, graph } => {
            stages::predict(&ontology()?, model, graph, cli.out.as_deref())?;
        }
        Command::Eval {
            model,
            corpus,
            split,
            on,
            table,
            alpha,
        } => {
            let out = out()?;
            let report = stages::eval(&ontology()?, model, corpus, split, (*on).into(), table.as_deref(), *alpha, &out)?;
            print!("{}", report.moment_table());
        }
        Command::Correlate {
            model,
            corpus,
            split,
            on,
            classes,
        } => {
            let out = out()?;
            let all = stages::correlate(&ontology()?, model, corpus, split, (*on).into(), classes, &out)?;
            for m in all {
                println!("{:<24} frobenius {:.4}", m.class, m.frobenius);
            }
        }
        Command::ExportHeatmap { input, class, which } => {
            let out = out()?;
            stages::export_heatmap(input, class, *which == Which::Truth, &out)?;
        }
        Command::Pipeline => {
            let Some(config) = cli.config.as_deref() else {
                return Err(missing("config", name));
            };
            let (layout, report) = pipeline::run(Path::new(config), cli.out.as_deref(), cli.seed)?;
            print!("{}", report.moment_table());
            eprintln!("artifacts in {}", layout.dir.display());
        }
        Command::Validate { graph, corpus } => {
            if graph.is_none() && corpus.is_none() {
                return Err(missing("graph or --corpus", name));
            }
            let problems = stages::validate(&ontology()?, graph.as_deref(), corpus.as_deref())?;
            if !problems.is_empty() {
                for p in &problems {
                    eprintln!("{p}");
                }
                return Err(anyhow::anyhow!("{} violation(s)", problems.len()).into());
            }
            println!("ok");
        }
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Gen { .. } => "gen",
        Command::Split { .. } => "split",
        Command::OracleFit { .. } => "oracle-fit",
        Command::OraclePredict { .. } => "oracle-predict",
        Command::Train { .. } => "train",
        Command::Predict { .. } => "predict",
        Command::Eval { .. } => "eval",
        Command::Correlate { .. } => "correlate",
        Command::ExportHeatmap { .. } => "export-heatmap",
        Command::Pipeline => "pipeline",
        Command::Validate { .. } => "validate",
    }
}
