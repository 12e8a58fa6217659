//! Run configuration: one TOML file, overridable key by key from the command
//! line, resolved once and written next to the outputs of every run.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use narrator_core::backend::BackendBudget;
use narrator_core::iteration::GenerationOptions;
use narrator_core::measures::DEFAULT_TAU_GRID;
use narrator_core::{IterationConfig, ScoringContext, SelectionStrategy, TauDistribution};
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "run-config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory of instance files.
    pub corpus: PathBuf,
    pub output: PathBuf,
    /// Iteration checkpoint; `<output>/state.json` when unset.
    pub state: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            output: "out".into(),
            state: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Server root for the HTTP backend. `NARRATOR_API_BASE` wins when set.
    pub base_url: Option<String>,
    pub generator_model: String,
    pub scoring_model: String,
    /// Seed of the mock backend.
    pub seed: u64,
    pub max_concurrent: usize,
    pub max_retries: u32,
    pub retry_backoff_ms: Vec<u64>,
    pub request_timeout_secs: u64,
    pub poll_interval_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let budget = BackendBudget::default();
        Self {
            kind: BackendKind::Mock,
            base_url: None,
            generator_model: "m0".into(),
            scoring_model: "scorer".into(),
            seed: 0,
            max_concurrent: budget.max_concurrent,
            max_retries: budget.max_retries,
            retry_backoff_ms: budget.retry_backoff.iter().map(|d| d.as_millis() as u64).collect(),
            request_timeout_secs: budget.request_timeout.as_secs(),
            poll_interval_secs: 30,
        }
    }
}

impl BackendConfig {
    pub fn budget(&self) -> BackendBudget {
        BackendBudget {
            max_concurrent: self.max_concurrent,
            max_retries: self.max_retries,
            retry_backoff: self.retry_backoff_ms.iter().map(|&ms| Duration::from_millis(ms)).collect(),
            request_timeout: Duration::from_secs(self.request_timeout_secs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerbalizerConfig {
    pub hop_k: usize,
    pub prune_threshold: Option<f64>,
    pub tail_mask_fraction: f64,
    pub with_scores: bool,
}

impl Default for VerbalizerConfig {
    fn default() -> Self {
        let g = GenerationOptions::default();
        Self {
            hop_k: g.hop_k,
            prune_threshold: g.prune_threshold,
            tail_mask_fraction: g.tail_mask_fraction,
            with_scores: g.with_scores,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasuresConfig {
    pub tau_grid: Vec<f64>,
    /// Uniform over the grid when unset.
    pub tau_weights: Option<Vec<f64>>,
    pub max_prompt_words: Option<usize>,
}

impl Default for MeasuresConfig {
    fn default() -> Self {
        Self {
            tau_grid: DEFAULT_TAU_GRID.to_vec(),
            tau_weights: None,
            max_prompt_words: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationSettings {
    /// `balanced:<fraction>`, `weighted:<s>,<f>,<b>` or `single:<f_s|f_f|f_b>`.
    pub strategy: String,
    pub quota: usize,
    pub candidates_per_instance: usize,
    pub iterations: usize,
    pub epochs: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub parallel: bool,
}

impl Default for IterationSettings {
    fn default() -> Self {
        let c = IterationConfig::default();
        Self {
            strategy: "balanced:0.5".into(),
            quota: c.strategy.quota(),
            candidates_per_instance: c.candidates_per_instance,
            iterations: c.iterations,
            epochs: c.epochs,
            temperature: c.generation.temperature,
            max_tokens: c.generation.max_tokens,
            parallel: c.parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub backend: BackendConfig,
    pub verbalizer: VerbalizerConfig,
    pub measures: MeasuresConfig,
    pub iteration: IterationSettings,
}

/// Parses a `--set` value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key was just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `section.key` (any depth) in `table`.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} is malformed");
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .with_context(|| format!("override {key:?}: {part} is not a table"))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if any), applies the overrides in order and fills
    /// everything else with defaults.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?
                .parse::<toml::Table>()
                .with_context(|| format!("parsing config {}", p.display()))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .context("configuration does not match the expected schema")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn state_path(&self) -> PathBuf {
        self.paths
            .state
            .clone()
            .unwrap_or_else(|| self.paths.output.join("state.json"))
    }

    pub fn strategy(&self) -> Result<SelectionStrategy> {
        let s: SelectionStrategy = self.iteration.strategy.parse()?;
        let s = s.with_quota(self.iteration.quota);
        s.validate()?;
        Ok(s)
    }

    pub fn tau(&self) -> Result<TauDistribution<f64>> {
        let grid = self.measures.tau_grid.clone();
        Ok(match &self.measures.tau_weights {
            Some(w) => TauDistribution::new(grid, w.clone())?,
            None => TauDistribution::uniform(grid)?,
        })
    }

    pub fn scoring(&self) -> Result<ScoringContext<f64>> {
        let mut ctx = ScoringContext::new(self.backend.scoring_model.clone())
            .with_tau(self.tau()?)
            .with_hop_k(self.verbalizer.hop_k);
        ctx.max_prompt_words = self.measures.max_prompt_words;
        Ok(ctx)
    }

    pub fn generation(&self) -> GenerationOptions {
        GenerationOptions {
            hop_k: self.verbalizer.hop_k,
            prune_threshold: self.verbalizer.prune_threshold,
            with_scores: self.verbalizer.with_scores,
            tail_mask_fraction: self.verbalizer.tail_mask_fraction,
            temperature: self.iteration.temperature,
            max_tokens: self.iteration.max_tokens,
        }
    }

    pub fn iteration_config(&self) -> Result<IterationConfig> {
        let c = IterationConfig {
            generation: self.generation(),
            candidates_per_instance: self.iteration.candidates_per_instance,
            strategy: self.strategy()?,
            iterations: self.iteration.iterations,
            epochs: self.iteration.epochs,
            parallel: self.iteration.parallel,
        };
        c.validate()?;
        Ok(c)
    }

    /// Range checks, delegated to the owning types, plus path existence.
    pub fn validate(&self, needs_corpus: bool) -> Result<()> {
        if self.verbalizer.hop_k == 0 {
            bail!("verbalizer.hop_k must be at least 1");
        }
        if let Some(t) = self.verbalizer.prune_threshold {
            if !t.is_finite() {
                bail!("verbalizer.prune_threshold must be finite");
            }
        }
        self.backend.budget().validate()?;
        if self.backend.generator_model.trim().is_empty() || self.backend.scoring_model.trim().is_empty() {
            bail!("backend model references must not be empty");
        }
        self.tau()?;
        self.iteration_config()?;
        if self.measures.max_prompt_words == Some(0) {
            bail!("measures.max_prompt_words must be at least 1");
        }
        if needs_corpus && !self.paths.corpus.is_dir() {
            bail!("corpus directory {} does not exist", self.paths.corpus.display());
        }
        if let Some(parent) = self.paths.output.parent().filter(|p| !p.as_os_str().is_empty()) {
            if !parent.is_dir() {
                bail!("parent of output directory {} does not exist", self.paths.output.display());
            }
        }
        Ok(())
    }
}
