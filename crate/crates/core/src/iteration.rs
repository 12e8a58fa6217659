//! Expert iteration: generate candidate explanations with the current
//! generator, score them, keep the best, fine-tune on the kept ones and repeat.
//! Everything kept is accumulated for distilling a student explainer.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, Client, GenerationRequest};
use crate::finetune::{self, Record, ValidationError};
use crate::measures::{score_all, MeasureError, ScoreTriple, ScoringContext};
use crate::prompts::{scoring_templates_hash, GENERATE_PLAIN, GENERATE_WITH_SALIENCY};
use crate::scalar::{floor_fraction, mean, Scalar};
use crate::selection::{select_indices, SelectionError, SelectionStrategy};
use crate::tag::ExplanationInstance;
use crate::verbalizer::{build_bfs_tree, render_with, serialize_plain, TokenRef, TokenView, DEFAULT_HOP_K};

#[derive(Debug, Error)]
pub enum IterationError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("state file {path}: {message}")]
    State { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("instance {0} is not in the dataset")]
    UnknownInstance(String),
    #[error("instance {instance}: {reason}")]
    Batch { instance: String, reason: String },
}

pub type Result<T> = std::result::Result<T, IterationError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> IterationError {
    IterationError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// How generation prompts are built and sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationOptions {
    pub hop_k: usize,
    /// Drop subtrees whose tokens all score at or below this value.
    pub prune_threshold: Option<f64>,
    pub with_scores: bool,
    /// Fraction of the least salient tokens left out of the prompt.
    pub tail_mask_fraction: f64,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            hop_k: DEFAULT_HOP_K,
            prune_threshold: None,
            with_scores: true,
            tail_mask_fraction: 0.05,
            temperature: 1.0,
            max_tokens: 512,
        }
    }
}

impl GenerationOptions {
    pub fn validate(&self) -> Result<()> {
        if self.hop_k == 0 {
            return Err(IterationError::Config("hop_k must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.tail_mask_fraction) {
            return Err(IterationError::Config(format!(
                "tail_mask_fraction {} is outside [0, 1)",
                self.tail_mask_fraction
            )));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) || self.max_tokens == 0 {
            return Err(IterationError::Config("temperature must be >= 0 and max_tokens >= 1".into()));
        }
        Ok(())
    }
}

/// Saliency paragraph with the least salient `tail_mask_fraction` of its
/// tokens removed.
pub fn build_generation_document(instance: &ExplanationInstance, options: &GenerationOptions) -> String {
    let mut tree = build_bfs_tree(instance, options.hop_k);
    if let Some(threshold) = options.prune_threshold {
        tree = tree.prune(instance, threshold);
    }
    let ranked = tree.ranked_tokens(instance);
    let dropped: std::collections::BTreeSet<TokenRef> = ranked
        [ranked.len() - floor_fraction(options.tail_mask_fraction, ranked.len())..]
        .iter()
        .copied()
        .collect();
    render_with(&tree, instance, options.with_scores, |t| {
        if dropped.contains(&t) {
            TokenView::Drop
        } else {
            TokenView::Keep
        }
    })
    .text
}

fn labels_phrase(instance: &ExplanationInstance) -> String {
    instance.prediction().label_set().join(", ")
}

/// Full generator prompt: the with-saliency template when `with_scores`,
/// otherwise the plain one.
pub fn build_generation_prompt(instance: &ExplanationInstance, options: &GenerationOptions) -> String {
    let template = if options.with_scores {
        GENERATE_WITH_SALIENCY
    } else {
        GENERATE_PLAIN
    };
    let document = build_generation_document(instance, options);
    let num_labels = instance.prediction().label_set().len().to_string();
    template.render(&[
        ("num_labels", &num_labels),
        ("labels", &labels_phrase(instance)),
        ("document", &document),
        ("label", instance.prediction().label()),
    ])
}

/// Student prompt: plain serialization of the whole ego graph and the
/// prediction, no saliency.
pub fn build_distillation_prompt(instance: &ExplanationInstance, hop_k: usize) -> String {
    let num_labels = instance.prediction().label_set().len().to_string();
    GENERATE_PLAIN.render(&[
        ("num_labels", &num_labels),
        ("labels", &labels_phrase(instance)),
        ("document", &serialize_plain(instance, hop_k)),
        ("label", instance.prediction().label()),
    ])
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub iteration: usize,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub sample: usize,
    pub prompt_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct ExplanationCandidate<S = f64> {
    pub instance_id: String,
    pub explanation: String,
    pub provenance: Provenance,
    pub scores: Option<ScoreTriple<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBatch<S = f64> {
    pub instance_id: String,
    pub candidates: Vec<ExplanationCandidate<S>>,
    pub iteration: usize,
    pub generator_model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationConfig {
    pub generation: GenerationOptions,
    pub candidates_per_instance: usize,
    pub strategy: SelectionStrategy,
    pub iterations: usize,
    pub epochs: u32,
    /// Process instances concurrently. Results are identical either way;
    /// only the order of audit-log lines differs.
    pub parallel: bool,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            generation: GenerationOptions::default(),
            candidates_per_instance: 4,
            strategy: SelectionStrategy::default(),
            iterations: 5,
            epochs: finetune::DEFAULT_EPOCHS,
            parallel: true,
        }
    }
}

impl IterationConfig {
    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.strategy.validate()?;
        if self.candidates_per_instance == 0 {
            return Err(IterationError::Config("candidates_per_instance must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct IterationStats<S = f64> {
    pub iteration: usize,
    pub generator_model: String,
    pub candidates: usize,
    pub selected: usize,
    /// Mean over every candidate scored in the iteration.
    pub mean: ScoreTriple<S>,
    pub selected_mean: Option<ScoreTriple<S>>,
}

/// A fine-tune whose dataset is written but whose job has not finished.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendingFineTune {
    pub dataset: PathBuf,
    pub base_model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct IterationState<S = f64> {
    /// Number of completed iterations.
    pub iteration: usize,
    pub base_model: String,
    pub generator_model: String,
    pub accumulated: Vec<ExplanationCandidate<S>>,
    pub score_stats: Vec<IterationStats<S>>,
    pub pending_finetune: Option<PendingFineTune>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
struct StateFile<S: Scalar> {
    content_hash: String,
    state: IterationState<S>,
}

impl<S: Scalar> IterationState<S> {
    pub fn new(base_model: impl Into<String>) -> Self {
        let base_model = base_model.into();
        Self {
            iteration: 0,
            generator_model: base_model.clone(),
            base_model,
            accumulated: Vec::new(),
            score_stats: Vec::new(),
            pending_finetune: None,
        }
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&serde_json::to_string(self).expect("state serializes"))
    }

    /// Pretty JSON wrapping the state and its hash; ends in a newline.
    pub fn to_canonical_json(&self) -> String {
        let file = StateFile {
            content_hash: self.content_hash(),
            state: self.clone(),
        };
        serde_json::to_string_pretty(&file).expect("state serializes") + "\n"
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let err = |message: String| IterationError::State {
            path: path.display().to_string(),
            message,
        };
        let file: StateFile<S> = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
        let actual = file.state.content_hash();
        if actual != file.content_hash {
            return Err(err(format!("content hash {} does not match {actual}", file.content_hash)));
        }
        Ok(file.state)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text, path)
    }

    /// Writes through a temporary file so a crash never leaves half a state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_canonical_json()).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| io_err(path, e))
    }
}

/// `n` unscored candidates from the current generator.
pub fn generate_candidates<S: Scalar>(
    client: &Client,
    instance: &ExplanationInstance,
    n: usize,
    state: &IterationState<S>,
    options: &GenerationOptions,
) -> Result<CandidateBatch<S>> {
    let prompt = build_generation_prompt(instance, options);
    let request = GenerationRequest {
        prompt,
        max_tokens: options.max_tokens,
        temperature: options.temperature,
        n,
        model_ref: state.generator_model.clone(),
    };
    let completions = client.generate(&request)?;
    let prompt_hash = sha256_hex(&request.prompt);
    let mut candidates = Vec::with_capacity(n);
    for (sample, text) in completions.into_iter().enumerate() {
        let explanation = text.trim().to_string();
        if explanation.is_empty() {
            return Err(IterationError::Batch {
                instance: instance.instance_id().to_string(),
                reason: format!("completion {sample} is empty"),
            });
        }
        candidates.push(ExplanationCandidate {
            instance_id: instance.instance_id().to_string(),
            explanation,
            provenance: Provenance {
                iteration: state.iteration,
                model: state.generator_model.clone(),
                temperature: options.temperature,
                max_tokens: options.max_tokens,
                sample,
                prompt_hash: prompt_hash.clone(),
            },
            scores: None,
        });
    }
    Ok(CandidateBatch {
        instance_id: instance.instance_id().to_string(),
        candidates,
        iteration: state.iteration,
        generator_model: state.generator_model.clone(),
    })
}

/// Scored candidates selected by `strategy`, best first.
pub fn select<S: Scalar>(
    pool: &[ExplanationCandidate<S>],
    strategy: &SelectionStrategy,
) -> std::result::Result<Vec<ExplanationCandidate<S>>, SelectionError> {
    let triples = pool
        .iter()
        .enumerate()
        .map(|(i, c)| c.scores.ok_or(SelectionError::Unscored(i)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(select_indices(&triples, strategy)?
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportStyle {
    /// Saliency-paragraph prompt → explanation, for the generator.
    Generator,
    /// Plain serialization and prediction → explanation, for the student.
    Distillation,
}

/// Writes one chat record per candidate and validates the result.
pub fn export_finetune_dataset<S: Scalar>(
    candidates: &[ExplanationCandidate<S>],
    instances: &BTreeMap<String, ExplanationInstance>,
    style: ExportStyle,
    options: &GenerationOptions,
    path: &Path,
) -> Result<PathBuf> {
    if candidates.is_empty() {
        return Err(ValidationError::Empty.into());
    }
    let records = candidates
        .iter()
        .map(|c| {
            let instance = instances
                .get(&c.instance_id)
                .ok_or_else(|| IterationError::UnknownInstance(c.instance_id.clone()))?;
            let prompt = match style {
                ExportStyle::Generator => build_generation_prompt(instance, options),
                ExportStyle::Distillation => build_distillation_prompt(instance, options.hop_k),
            };
            Ok(Record::exchange(prompt, c.explanation.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    finetune::write_file(path, &records)?;
    finetune::validate_file(path)?;
    Ok(path.to_path_buf())
}

/// One line of the score log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreLogLine {
    pub iteration: usize,
    pub instance_id: String,
    pub sample: usize,
    pub generator_model: String,
    pub prompt_hash: String,
    pub scoring_model: String,
    pub scoring_templates: String,
    pub explanation: String,
    pub f_s: f64,
    pub f_f: f64,
    pub f_b: f64,
}

/// File layout of an iteration run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub state: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        Self {
            state: dir.join("state.json"),
            dir,
        }
    }

    pub fn with_state(mut self, state: impl Into<PathBuf>) -> Self {
        self.state = state.into();
        self
    }

    pub fn scores(&self) -> PathBuf {
        self.dir.join("scores.jsonl")
    }

    pub fn finetune(&self, iteration: usize) -> PathBuf {
        self.dir.join("finetune").join(format!("generator-iter{iteration:02}.jsonl"))
    }

    pub fn distillation(&self) -> PathBuf {
        self.dir.join("distill.jsonl")
    }
}

pub struct Runner<'a, S: Scalar = f64> {
    pub client: &'a Client,
    pub scoring: &'a ScoringContext<S>,
    pub config: &'a IterationConfig,
    pub paths: &'a RunPaths,
}

impl<S: Scalar> Runner<'_, S> {
    fn score_batch(&self, instance: &ExplanationInstance, state: &IterationState<S>) -> Result<CandidateBatch<S>> {
        let mut batch = generate_candidates(
            self.client,
            instance,
            self.config.candidates_per_instance,
            state,
            &self.config.generation,
        )?;
        for c in &mut batch.candidates {
            c.scores = Some(score_all(self.client, instance, &c.explanation, self.scoring)?);
        }
        Ok(batch)
    }

    /// Keeps only score-log lines of iterations before `iteration`, so a
    /// re-run iteration never duplicates lines. A torn final line from a
    /// killed run is dropped.
    fn truncate_score_log(&self, iteration: usize) -> Result<()> {
        let path = self.paths.scores();
        let Ok(text) = fs::read_to_string(&path) else {
            return Ok(());
        };
        let complete = text.rfind('\n').map_or("", |i| &text[..=i]);
        let mut kept = String::new();
        for line in complete.lines() {
            let parsed: ScoreLogLine = serde_json::from_str(line).map_err(|e| io_err(&path, e))?;
            if parsed.iteration < iteration {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        fs::write(&path, kept).map_err(|e| io_err(&path, e))
    }

    fn append_scores(&self, pool: &[ExplanationCandidate<S>]) -> Result<()> {
        let path = self.paths.scores();
        let templates = scoring_templates_hash();
        let mut out = String::new();
        for c in pool {
            let s = c.scores.expect("pool is scored");
            let line = ScoreLogLine {
                iteration: c.provenance.iteration,
                instance_id: c.instance_id.clone(),
                sample: c.provenance.sample,
                generator_model: c.provenance.model.clone(),
                prompt_hash: c.provenance.prompt_hash.clone(),
                scoring_model: self.scoring.scoring_model.clone(),
                scoring_templates: templates.clone(),
                explanation: c.explanation.clone(),
                f_s: s.f_s.to_f64_lossy(),
                f_f: s.f_f.to_f64_lossy(),
                f_b: s.f_b.to_f64_lossy(),
            };
            out.push_str(&serde_json::to_string(&line).expect("score line serializes"));
            out.push('\n');
        }
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| io_err(&path, e))
    }

    /// Finishes a fine-tune recorded in the checkpoint.
    pub fn resume_pending(&self, state: &mut IterationState<S>) -> Result<()> {
        let Some(pending) = state.pending_finetune.clone() else {
            return Ok(());
        };
        let model = self
            .client
            .submit_finetune_with(&pending.dataset, &pending.base_model, self.config.epochs)?;
        log::info!("iteration {}: generator is now {model}", state.iteration);
        state.generator_model = model;
        state.pending_finetune = None;
        state.iteration += 1;
        state.save(&self.paths.state)
    }

    /// Generate, score, select, export, checkpoint, fine-tune.
    pub fn run_iteration(&self, dataset: &[ExplanationInstance], state: &mut IterationState<S>) -> Result<()> {
        self.config.validate()?;
        if state.pending_finetune.is_some() {
            return self.resume_pending(state);
        }
        fs::create_dir_all(&self.paths.dir).map_err(|e| io_err(&self.paths.dir, e))?;
        self.truncate_score_log(state.iteration)?;

        let snapshot = &*state;
        let batches: Vec<CandidateBatch<S>> = if self.config.parallel {
            dataset
                .par_iter()
                .map(|inst| self.score_batch(inst, snapshot))
                .collect::<Result<_>>()?
        } else {
            dataset
                .iter()
                .map(|inst| self.score_batch(inst, snapshot))
                .collect::<Result<_>>()?
        };
        let pool: Vec<ExplanationCandidate<S>> = batches.into_iter().flat_map(|b| b.candidates).collect();
        self.append_scores(&pool)?;

        let selected = match select(&pool, &self.config.strategy) {
            Ok(s) => s,
            Err(SelectionError::EmptySelection) => {
                log::warn!("iteration {}: no candidate passed selection", state.iteration);
                Vec::new()
            }
            Err(e) => return Err(e.into()),
        };

        let triple_mean = |cs: &[ExplanationCandidate<S>]| -> Option<ScoreTriple<S>> {
            let col = |f: fn(&ScoreTriple<S>) -> S| -> Vec<S> { cs.iter().filter_map(|c| c.scores.as_ref().map(f)).collect() };
            Some(ScoreTriple {
                f_s: mean(&col(|t| t.f_s))?,
                f_f: mean(&col(|t| t.f_f))?,
                f_b: mean(&col(|t| t.f_b))?,
            })
        };
        let stats = IterationStats {
            iteration: state.iteration,
            generator_model: state.generator_model.clone(),
            candidates: pool.len(),
            selected: selected.len(),
            mean: triple_mean(&pool).ok_or_else(|| IterationError::Config("dataset is empty".into()))?,
            selected_mean: triple_mean(&selected),
        };
        log::info!(
            "iteration {}: {} candidates, {} selected, mean f_s {} f_f {} f_b {}",
            state.iteration,
            stats.candidates,
            stats.selected,
            stats.mean.f_s,
            stats.mean.f_f,
            stats.mean.f_b
        );
        state.score_stats.push(stats);
        state.accumulated.extend(selected.iter().cloned());

        if selected.is_empty() {
            state.iteration += 1;
            return state.save(&self.paths.state);
        }

        let instances: BTreeMap<String, ExplanationInstance> = dataset
            .iter()
            .map(|i| (i.instance_id().to_string(), i.clone()))
            .collect();
        let file = export_finetune_dataset(
            &selected,
            &instances,
            ExportStyle::Generator,
            &self.config.generation,
            &self.paths.finetune(state.iteration),
        )?;
        state.pending_finetune = Some(PendingFineTune {
            dataset: file,
            base_model: state.generator_model.clone(),
        });
        state.save(&self.paths.state)?;
        self.resume_pending(state)
    }

    /// Runs iterations until `config.iterations` have completed, first
    /// finishing any fine-tune left pending by an interrupted run.
    pub fn run_loop(&self, dataset: &[ExplanationInstance], state: &mut IterationState<S>) -> Result<()> {
        self.resume_pending(state)?;
        while state.iteration < self.config.iterations {
            self.run_iteration(dataset, state)?;
        }
        Ok(())
    }
}

/// Loads the checkpoint at `paths.state` when `resume` is set and it exists,
/// otherwise starts fresh from `base_model`.
pub fn initial_state<S: Scalar>(paths: &RunPaths, base_model: &str, resume: bool) -> Result<IterationState<S>> {
    if resume && paths.state.exists() {
        let state = IterationState::load(&paths.state)?;
        if state.base_model != base_model {
            return Err(IterationError::State {
                path: paths.state.display().to_string(),
                message: format!("checkpoint starts from {}, configuration from {base_model}", state.base_model),
            });
        }
        return Ok(state);
    }
    Ok(IterationState::new(base_model))
}
