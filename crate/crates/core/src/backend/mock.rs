//! Deterministic in-process backend.
//!
//! Generation is served from a prompt table or a pluggable [`CompletionModel`];
//! scoring is delegated to a [`ConditionalModel`]. Every answer is a pure
//! function of the mock's seed and the request.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashSet};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::{
    needs_separator, BackendBudget, BackendError, Client, FineTuneJob, GenerationRequest,
    LanguageModel, LogProbQuery, Result,
};

/// Conditional word distribution used by the mock for scoring.
pub trait ConditionalModel: Send + Sync {
    /// `ln P(word | context)`.
    fn word_log_prob(&self, model: &str, context: &str, word: &str) -> f64;

    /// Log-probability of each word given the context extended by the words
    /// before it. Implementations may override this with an incremental form
    /// but must agree with `word_log_prob` on the extended context.
    fn continuation(&self, model: &str, context: &str, words: &[String]) -> Vec<f64> {
        let mut ctx = context.to_string();
        let mut out = Vec::with_capacity(words.len());
        for w in words {
            out.push(self.word_log_prob(model, &ctx, w));
            if needs_separator(&ctx) {
                ctx.push(' ');
            }
            ctx.push_str(w);
        }
        out
    }
}

impl<F> ConditionalModel for F
where
    F: Fn(&str, &str, &str) -> f64 + Send + Sync,
{
    fn word_log_prob(&self, model: &str, context: &str, word: &str) -> f64 {
        self(model, context, word)
    }
}

/// Explicit `P(word | context)` table with a fallback probability.
#[derive(Debug, Clone, Default)]
pub struct TableModel {
    entries: BTreeMap<(String, String), f64>,
    default_prob: f64,
}

impl TableModel {
    pub fn new(default_prob: f64) -> Self {
        Self {
            entries: BTreeMap::new(),
            default_prob,
        }
    }

    pub fn with(mut self, context: &str, word: &str, prob: f64) -> Self {
        self.entries.insert((context.to_string(), word.to_string()), prob);
        self
    }
}

impl ConditionalModel for TableModel {
    fn word_log_prob(&self, _model: &str, context: &str, word: &str) -> f64 {
        self.entries
            .get(&(context.to_string(), word.to_string()))
            .copied()
            .unwrap_or(self.default_prob)
            .ln()
    }
}

/// Pseudo-random conditionals on a dyadic grid: every log-probability is a
/// multiple of 1/256 in `[-16, 0)`, so sums of them are exact in `f64`.
#[derive(Debug, Clone, Copy)]
pub struct HashedModel {
    seed: u64,
}

impl HashedModel {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn value(&self, state: &DefaultHasher, word: &str) -> f64 {
        let mut h = state.clone();
        0xffu8.hash(&mut h);
        word.hash(&mut h);
        self.seed.hash(&mut h);
        -((1 + h.finish() % 4096) as f64) / 256.0
    }

    fn start(model: &str) -> DefaultHasher {
        let mut h = DefaultHasher::new();
        model.hash(&mut h);
        h
    }
}

impl ConditionalModel for HashedModel {
    fn word_log_prob(&self, model: &str, context: &str, word: &str) -> f64 {
        let mut h = Self::start(model);
        h.write(context.as_bytes());
        self.value(&h, word)
    }

    fn continuation(&self, model: &str, context: &str, words: &[String]) -> Vec<f64> {
        // Streams the extended context through one hasher; `Hasher::write`
        // calls compose, so this matches `word_log_prob` on each prefix.
        let mut h = Self::start(model);
        h.write(context.as_bytes());
        let mut trailing_sep = !needs_separator(context);
        let mut out = Vec::with_capacity(words.len());
        for w in words {
            out.push(self.value(&h, w));
            if !trailing_sep {
                h.write(b" ");
            }
            h.write(w.as_bytes());
            trailing_sep = false;
        }
        out
    }
}

/// Assigns `hit` to words whose cue (the word itself, or an associated cue
/// word) occurs in the context, `miss` otherwise. Matching is case-insensitive
/// and ignores surrounding ASCII punctuation.
#[derive(Debug, Clone)]
pub struct OverlapModel {
    hit: f64,
    miss: f64,
    cues: BTreeMap<String, Vec<String>>,
}

pub fn normalize_word(word: &str) -> String {
    normalized(word).into_owned()
}

fn normalized(word: &str) -> Cow<'_, str> {
    let trimmed = word.trim_matches(|c: char| c.is_ascii_punctuation());
    if trimmed.chars().any(char::is_uppercase) {
        Cow::Owned(trimmed.to_lowercase())
    } else {
        Cow::Borrowed(trimmed)
    }
}

impl OverlapModel {
    pub fn new(hit: f64, miss: f64) -> Self {
        Self {
            hit,
            miss,
            cues: BTreeMap::new(),
        }
    }

    /// Words in `cues` also count as evidence for `word`.
    pub fn with_cues<I, S>(mut self, word: &str, cues: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.cues
            .entry(normalize_word(word))
            .or_default()
            .extend(cues.into_iter().map(|c| normalize_word(c.as_ref())));
        self
    }

    fn score(&self, seen: &HashSet<Cow<'_, str>>, word: &str) -> f64 {
        let key = normalized(word);
        let hit = seen.contains(&key)
            || self
                .cues
                .get(key.as_ref())
                .is_some_and(|cs| cs.iter().any(|c| seen.contains(&Cow::Borrowed(c.as_str()))));
        if hit {
            self.hit.ln()
        } else {
            self.miss.ln()
        }
    }
}

impl ConditionalModel for OverlapModel {
    fn word_log_prob(&self, _model: &str, context: &str, word: &str) -> f64 {
        let seen = context.split_whitespace().map(normalized).collect();
        self.score(&seen, word)
    }

    fn continuation(&self, _model: &str, context: &str, words: &[String]) -> Vec<f64> {
        let mut seen: HashSet<Cow<'_, str>> = context.split_whitespace().map(normalized).collect();
        let mut out = Vec::with_capacity(words.len());
        for w in words {
            out.push(self.score(&seen, w));
            seen.insert(normalized(w));
        }
        out
    }
}

/// Produces completions for prompts missing from the mock's table.
pub trait CompletionModel: Send + Sync {
    fn complete(&self, request: &GenerationRequest, seed: u64) -> Result<Vec<String>>;

    /// Called after the mock has accepted a fine-tune job.
    fn on_fine_tune(&self, _base: &str, _new_model: &str, _dataset: &Path) -> Result<()> {
        Ok(())
    }
}

pub struct MockBackend {
    seed: u64,
    completions: BTreeMap<String, Vec<String>>,
    generator: Option<Arc<dyn CompletionModel>>,
    scorer: Arc<dyn ConditionalModel>,
    transport_failures: AtomicUsize,
    job_failures: AtomicUsize,
}

impl MockBackend {
    /// Defaults to [`HashedModel`] scoring and no generator.
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            completions: BTreeMap::new(),
            generator: None,
            scorer: Arc::new(HashedModel::new(seed)),
            transport_failures: AtomicUsize::new(0),
            job_failures: AtomicUsize::new(0),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_completions<I, S>(mut self, prompt: &str, completions: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.completions
            .insert(prompt.to_string(), completions.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_generator(mut self, generator: impl CompletionModel + 'static) -> Self {
        self.generator = Some(Arc::new(generator));
        self
    }

    pub fn with_shared_generator(mut self, generator: Arc<dyn CompletionModel>) -> Self {
        self.generator = Some(generator);
        self
    }

    pub fn with_scorer(mut self, scorer: impl ConditionalModel + 'static) -> Self {
        self.scorer = Arc::new(scorer);
        self
    }

    /// The next `n` calls of any kind fail with a transport error.
    pub fn inject_transport_failures(&self, n: usize) {
        self.transport_failures.store(n, Ordering::SeqCst);
    }

    /// The next `n` fine-tune jobs fail.
    pub fn inject_job_failures(&self, n: usize) {
        self.job_failures.store(n, Ordering::SeqCst);
    }

    fn take(counter: &AtomicUsize) -> bool {
        counter
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
    }

    fn transport_gate(&self) -> Result<()> {
        if Self::take(&self.transport_failures) {
            Err(BackendError::Transport("injected transport failure".into()))
        } else {
            Ok(())
        }
    }

    pub fn into_client(self) -> Client {
        Client::new(Arc::new(self), BackendBudget::default()).expect("default budget is valid")
    }

    /// `<base>@ft<i>`, where `i` counts the fine-tunes already in `base`.
    pub fn fine_tuned_name(base: &str) -> String {
        format!("{base}@ft{}", base.matches("@ft").count() + 1)
    }
}

impl LanguageModel for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &GenerationRequest) -> Result<Vec<String>> {
        self.transport_gate()?;
        if let Some(table) = self.completions.get(&request.prompt) {
            if request.n > table.len() {
                return Err(BackendError::refusal(format!(
                    "mock holds {} completions for this prompt, {} requested",
                    table.len(),
                    request.n
                )));
            }
            return Ok(table[..request.n].to_vec());
        }
        match &self.generator {
            Some(generator) => generator.complete(request, self.seed),
            None => Err(BackendError::refusal("mock has no completion for this prompt")),
        }
    }

    fn continuation_log_probs(&self, query: &LogProbQuery) -> Result<Vec<f64>> {
        self.transport_gate()?;
        Ok(self
            .scorer
            .continuation(&query.model_ref, &query.context, &query.continuation))
    }

    fn fine_tune(&self, job: &FineTuneJob) -> Result<String> {
        self.transport_gate()?;
        if Self::take(&self.job_failures) {
            return Err(BackendError::JobFailed("injected job failure".into()));
        }
        let name = Self::fine_tuned_name(&job.base_model);
        if let Some(generator) = &self.generator {
            generator.on_fine_tune(&job.base_model, &name, &job.dataset)?;
        }
        Ok(name)
    }
}
