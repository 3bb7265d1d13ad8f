//! `rvr` command-line front end: argument parsing, config resolution and
//! dispatch to [`commands`].

pub mod artifact;
pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use rvr_core::dataset::MatchMode;
use rvr_core::engine::{MergeMode, TimingMode};

use crate::commands::ExampleMode;
use crate::config::{ExperimentConfig, VerifierChoice};

#[derive(Debug, Parser)]
#[command(
    name = "rvr",
    version,
    about = "Retrieve-verify-retrieve experiment runner"
)]
pub struct Cli {
    /// Experiment config (TOML). Flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the bundled synthetic dataset.
    Synth(SynthArgs),
    /// Validate a corpus and query file and report statistics.
    Ingest(IngestArgs),
    /// Write a randomly initialized embedder.
    InitModel(InitModelArgs),
    /// Embed a corpus into an index file.
    BuildIndex(BuildIndexArgs),
    /// Generate contrastive training examples.
    GenTrain(GenTrainArgs),
    /// Train an embedder on an examples file.
    Train(TrainArgs),
    /// Run retrieval for every query and write traces.
    Run(RunArgs),
    /// Score a trace file.
    Eval(EvalArgs),
    /// Paired bootstrap comparison of two reports.
    Compare(CompareArgs),
    /// init-model, gen-train, train, build-index, run and eval in sequence.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_docs: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Statistics file; defaults to `<output_dir>/ingest.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitModelArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_out: Option<usize>,
    #[arg(long)]
    pub n_features: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenTrainArgs {
    #[arg(long, value_enum)]
    pub mode: ExampleMode,
    /// Context budget for subsequent-retriever examples.
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training queries with gold documents.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Starting model; a fresh random model when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Loss curve CSV; defaults to the model path with `.loss.csv`.
    #[arg(long)]
    pub curve_out: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub trace_out: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub initial: Option<PathBuf>,
    #[arg(long)]
    pub initial_index: Option<PathBuf>,
    #[arg(long)]
    pub subsequent: Option<PathBuf>,
    #[arg(long)]
    pub subsequent_index: Option<PathBuf>,
    #[arg(long)]
    pub turns: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub merge: Option<MergeArg>,
    #[arg(long, value_enum)]
    pub verifier: Option<VerifierArg>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Record zero timings so traces are byte-reproducible.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum MergeArg {
    Accumulate,
    SplitHalf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum VerifierArg {
    Oracle,
    TopM,
    Llm,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Cutoff; defaults to `run.output_k`.
    #[arg(long)]
    pub k: Option<usize>,
    /// Report JSON; defaults to the trace path with `.report.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Use the initial retriever for every round instead of training a
    /// separate subsequent retriever.
    #[arg(long)]
    pub shared_retriever: bool,
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let stem = p.file_stem().unwrap_or_default().to_string_lossy();
    p.with_file_name(format!("{stem}{suffix}"))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig {
            output_dir: PathBuf::from("."),
            ..Default::default()
        }),
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => {
            set(&mut cfg.synth.seed, a.seed);
            set(&mut cfg.synth.n_docs, a.n_docs);
            set(&mut cfg.synth.n_train_queries, a.n_train);
            set(&mut cfg.synth.n_test_queries, a.n_test);
            let out = a.out.unwrap_or_else(|| cfg.output_dir.clone());
            commands::synth(&cfg, &out)
        }
        Command::Ingest(a) => {
            set_path(&mut cfg.data.corpus, a.corpus);
            set_path(&mut cfg.data.queries, a.queries);
            let out = a.out.unwrap_or_else(|| cfg.output_path("ingest.json"));
            commands::ingest(&cfg, &out)
        }
        Command::InitModel(a) => {
            set(&mut cfg.embedder.d_out, a.d_out);
            set(&mut cfg.embedder.n_features, a.n_features);
            cfg.validate()?;
            let seed = a.seed.unwrap_or(cfg.seed);
            commands::init_model(&cfg, seed, &a.out).map(|_| ())
        }
        Command::BuildIndex(a) => {
            set_path(&mut cfg.data.corpus, a.corpus);
            commands::build_index(&cfg, &a.model, &a.out)
        }
        Command::GenTrain(a) => {
            set_path(&mut cfg.data.corpus, a.corpus);
            set_path(&mut cfg.data.train_queries, a.queries);
            let m = a.m.unwrap_or(cfg.gen_train.context_budget);
            let seed = a.seed.unwrap_or(cfg.seed);
            commands::gen_train(&cfg, a.mode, m, seed, &a.out).map(|_| ())
        }
        Command::Train(a) => {
            set_path(&mut cfg.data.corpus, a.corpus);
            set(&mut cfg.train.total_steps, a.steps);
            set(&mut cfg.train.learning_rate, a.lr);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.seed, a.seed);
            cfg.validate()?;
            let curve = a
                .curve_out
                .unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
            commands::train(&cfg, a.init.as_deref(), &a.examples, &a.out, &curve)
        }
        Command::Run(a) => {
            set_path(&mut cfg.data.corpus, a.corpus);
            set_path(&mut cfg.data.queries, a.queries);
            set_path(&mut cfg.models.initial, a.initial);
            set_path(&mut cfg.models.initial_index, a.initial_index);
            set_path(&mut cfg.models.subsequent, a.subsequent);
            set_path(&mut cfg.models.subsequent_index, a.subsequent_index);
            set(&mut cfg.run.turns, a.turns);
            set(&mut cfg.run.verifier_budget, a.budget);
            set(&mut cfg.run.context_budget, a.context);
            set(&mut cfg.run.output_k, a.k);
            set(&mut cfg.run.workers, a.workers);
            if let Some(m) = a.merge {
                cfg.run.merge_mode = match m {
                    MergeArg::Accumulate => MergeMode::Accumulate,
                    MergeArg::SplitHalf => MergeMode::SplitHalf,
                };
            }
            if let Some(v) = a.verifier {
                cfg.verifier.kind = match v {
                    VerifierArg::Oracle => VerifierChoice::Oracle,
                    VerifierArg::TopM => VerifierChoice::TopM,
                    VerifierArg::Llm => VerifierChoice::Llm,
                };
            }
            if a.no_timing {
                cfg.run.timing = TimingMode::Off;
            }
            cfg.validate()?;
            commands::run(&cfg, &a.trace_out)
        }
        Command::Eval(a) => {
            set_path(&mut cfg.data.corpus, a.corpus);
            set_path(&mut cfg.data.queries, a.queries);
            if a.strict {
                cfg.data.match_mode = MatchMode::Strict;
            }
            let k = a.k.unwrap_or(cfg.run.output_k);
            let out = a
                .out
                .unwrap_or_else(|| with_suffix(&a.trace, ".report.json"));
            commands::eval(&cfg, &a.trace, k, &out, a.csv.as_deref()).map(|_| ())
        }
        Command::Compare(a) => {
            commands::compare(&a.a, &a.b, a.trials, a.alpha, a.seed, a.out.as_deref()).map(|_| ())
        }
        Command::Pipeline(a) => {
            if let Some(seed) = a.seed {
                cfg.seed = seed;
                cfg.train.seed = seed;
            }
            set(&mut cfg.output_dir, a.out_dir);
            cfg.validate()?;
            commands::pipeline(&cfg, a.shared_retriever).map(|_| ())
        }
    }
    .context(match cli.config {
        Some(p) => format!("with config {}", p.display()),
        None => "without a config file".to_string(),
    })
}
