//! Experiment configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rvr_core::dataset::MatchMode;
use rvr_core::embedder::EmbedderConfig;
use rvr_core::engine::{MergeMode, RunConfig, SubsequentDepth, TimingMode, TurnSemantics};
use rvr_core::synth::SynthConfig;
use rvr_core::trainer::{ContextBound, TrainConfig};
use rvr_core::verifier::{LlmConfig, LlmVerifier, VerifierKind};

pub const DEFAULT_API_KEY_ENV: &str = "RVR_VERIFIER_API_KEY";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub embedder: EmbedderConfig,
    pub models: ModelsSection,
    pub verifier: VerifierSection,
    pub run: RunSection,
    pub gen_train: GenTrainSection,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub corpus: Option<PathBuf>,
    /// Evaluation queries.
    pub queries: Option<PathBuf>,
    pub train_queries: Option<PathBuf>,
    pub match_mode: MatchMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsSection {
    pub initial: Option<PathBuf>,
    pub initial_index: Option<PathBuf>,
    /// Absent means the initial retriever serves every round.
    pub subsequent: Option<PathBuf>,
    pub subsequent_index: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierChoice {
    #[default]
    Oracle,
    TopM,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierSection {
    pub kind: VerifierChoice,
    pub match_mode: MatchMode,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub prompt_template: Option<String>,
    pub timeout_secs: u64,
    pub max_parallel: usize,
    pub max_tokens: u32,
    pub retries: u32,
    /// Name of the environment variable holding the API key. The key itself
    /// never appears in configs or manifests.
    pub api_key_env: String,
}

impl Default for VerifierSection {
    fn default() -> Self {
        Self {
            kind: VerifierChoice::Oracle,
            match_mode: MatchMode::Normalized,
            endpoint: None,
            model: None,
            prompt_template: None,
            timeout_secs: 60,
            max_parallel: 8,
            max_tokens: 8,
            retries: 2,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
        }
    }
}

impl VerifierSection {
    pub fn build(&self) -> Result<VerifierKind> {
        Ok(match self.kind {
            VerifierChoice::Oracle => VerifierKind::Oracle {
                mode: self.match_mode,
            },
            VerifierChoice::TopM => VerifierKind::TopM,
            VerifierChoice::Llm => {
                let endpoint = self
                    .endpoint
                    .as_deref()
                    .context("verifier.endpoint is required when verifier.kind = \"llm\"")?;
                let model = self
                    .model
                    .as_deref()
                    .context("verifier.model is required when verifier.kind = \"llm\"")?;
                let mut cfg = LlmConfig::new(endpoint, model)?;
                if let Some(t) = &self.prompt_template {
                    cfg.prompt_template = t.clone();
                }
                cfg.timeout = std::time::Duration::from_secs(self.timeout_secs);
                cfg.max_parallel = self.max_parallel;
                cfg.max_tokens = self.max_tokens;
                cfg.retries = self.retries;
                cfg.api_key = std::env::var(&self.api_key_env)
                    .ok()
                    .filter(|k| !k.is_empty());
                VerifierKind::Llm(LlmVerifier::new(cfg)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub turns: usize,
    pub verifier_budget: usize,
    pub context_budget: usize,
    pub output_k: usize,
    pub merge_mode: MergeMode,
    pub turn_semantics: TurnSemantics,
    pub subsequent_depth: SubsequentDepth,
    pub timing: TimingMode,
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        let r = RunConfig::reference();
        Self {
            turns: r.turns,
            verifier_budget: r.verifier_budget,
            context_budget: r.context_budget,
            output_k: r.output_k,
            merge_mode: r.merge_mode,
            turn_semantics: r.turn_semantics,
            subsequent_depth: r.subsequent_depth,
            timing: r.timing,
            workers: 1,
        }
    }
}

impl RunSection {
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            turns: self.turns,
            verifier_budget: self.verifier_budget,
            context_budget: self.context_budget,
            output_k: self.output_k,
            merge_mode: self.merge_mode,
            turn_semantics: self.turn_semantics,
            subsequent_depth: self.subsequent_depth,
            timing: self.timing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenTrainSection {
    /// Largest number of gold documents appended to a subsequent-retriever input.
    pub context_budget: usize,
    pub context_bound: ContextBound,
}

impl Default for GenTrainSection {
    fn default() -> Self {
        Self {
            context_budget: RunConfig::reference().context_budget,
            context_bound: ContextBound::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [
            &mut self.data.corpus,
            &mut self.data.queries,
            &mut self.data.train_queries,
            &mut self.models.initial,
            &mut self.models.initial_index,
            &mut self.models.subsequent,
            &mut self.models.subsequent_index,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Checks value ranges. Path existence is checked by the commands that
    /// read them.
    pub fn validate(&self) -> Result<()> {
        self.embedder
            .validate()
            .map_err(|e| anyhow::anyhow!("embedder: {e}"))?;
        self.run.run_config().validate()?;
        if self.run.workers == 0 {
            bail!("run.workers must be at least 1");
        }
        self.train.validate()?;
        if self.models.subsequent.is_some() != self.models.subsequent_index.is_some() {
            bail!("models.subsequent and models.subsequent_index must be set together");
        }
        if self.verifier.kind == VerifierChoice::Llm {
            if self.verifier.endpoint.is_none() {
                bail!("verifier.endpoint is required when verifier.kind = \"llm\"");
            }
            if self.verifier.model.is_none() {
                bail!("verifier.model is required when verifier.kind = \"llm\"");
            }
        }
        Ok(())
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

pub fn require_path<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    let p = value
        .as_ref()
        .with_context(|| format!("{key} is not set (config key or flag)"))?;
    if !p.exists() {
        bail!("{key}: {} does not exist", p.display());
    }
    Ok(p)
}
