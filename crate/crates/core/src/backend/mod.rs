//! Language-model services: text generation, continuation log-probabilities and
//! fine-tune jobs.
//!
//! Providers implement [`LanguageModel`]. Callers go through [`Client`], which
//! enforces the request contracts, bounds in-flight requests, retries transport
//! failures and writes every request/response pair to the audit log.

mod audit;
pub mod http;
pub mod mock;
pub mod simulated;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use audit::{AuditEntry, AuditLog};

use crate::finetune;

/// Stand-in for `ln 0`, so scores stay finite and totally ordered.
pub const ZERO_MASS_LOG_PROB: f64 = -1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request exceeded its time budget: {0}")]
    Budget(String),
    #[error("backend refused the request (status {status:?}): {body}")]
    Refusal { status: Option<u16>, body: String },
    #[error("backend cannot return token log-probabilities: {0}")]
    Unsupported(String),
    #[error("fine-tune job failed: {0}")]
    JobFailed(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn refusal(body: impl Into<String>) -> Self {
        Self::Refusal {
            status: None,
            body: body.into(),
        }
    }

    fn is_retryable(&self) -> bool {
        matches!(self, Self::Transport(_) | Self::Budget(_))
    }
}

pub type Result<T> = std::result::Result<T, BackendError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub n: usize,
    pub model_ref: String,
}

impl GenerationRequest {
    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(BackendError::InvalidRequest("n must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_tokens must be at least 1".into(),
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} must be a non-negative number",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// `ln P(continuation | context)` query. The continuation is pre-split into
/// whitespace-free scoring words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogProbQuery {
    pub context: String,
    pub continuation: Vec<String>,
    pub model_ref: String,
}

impl LogProbQuery {
    pub fn new(
        context: impl Into<String>,
        continuation: Vec<String>,
        model_ref: impl Into<String>,
    ) -> Self {
        Self {
            context: context.into(),
            continuation,
            model_ref: model_ref.into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.continuation.is_empty() {
            return Err(BackendError::InvalidRequest(
                "continuation must not be empty".into(),
            ));
        }
        if let Some(w) = self
            .continuation
            .iter()
            .find(|w| w.is_empty() || w.chars().any(char::is_whitespace))
        {
            return Err(BackendError::InvalidRequest(format!(
                "continuation word {w:?} is empty or contains whitespace"
            )));
        }
        Ok(())
    }
}

/// Appends scoring words to a context the way a continuation is laid out:
/// a single space between words, none after a trailing newline or space.
pub fn extend_context(context: &str, words: &[String]) -> String {
    let mut out = String::with_capacity(context.len() + words.iter().map(|w| w.len() + 1).sum::<usize>());
    out.push_str(context);
    for w in words {
        if needs_separator(&out) {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

pub(crate) fn needs_separator(text: &str) -> bool {
    text.chars().last().is_some_and(|c| !c.is_whitespace())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FineTuneJob {
    pub dataset: PathBuf,
    pub base_model: String,
    pub epochs: u32,
}

/// A provider of generation, scoring and fine-tuning.
pub trait LanguageModel: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &GenerationRequest) -> Result<Vec<String>>;

    /// Natural-log conditional probability of each continuation word given the
    /// context and the preceding words. `-inf` marks zero reported mass.
    fn continuation_log_probs(&self, query: &LogProbQuery) -> Result<Vec<f64>>;

    /// Runs a fine-tune job to completion and returns the new model reference.
    fn fine_tune(&self, job: &FineTuneJob) -> Result<String>;
}

/// Limits on in-flight requests, retries and request duration.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendBudget {
    pub max_concurrent: usize,
    pub max_retries: u32,
    /// Delay before retry `i`; the last entry repeats.
    pub retry_backoff: Vec<Duration>,
    pub request_timeout: Duration,
}

impl Default for BackendBudget {
    fn default() -> Self {
        Self {
            max_concurrent: 4,
            max_retries: 3,
            retry_backoff: vec![
                Duration::from_millis(250),
                Duration::from_secs(1),
                Duration::from_secs(4),
            ],
            request_timeout: Duration::from_secs(120),
        }
    }
}

impl BackendBudget {
    pub fn validate(&self) -> Result<()> {
        if self.max_concurrent == 0 {
            return Err(BackendError::InvalidRequest(
                "max_concurrent must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn backoff(&self, attempt: u32) -> Duration {
        self.retry_backoff
            .get(attempt as usize)
            .or(self.retry_backoff.last())
            .copied()
            .unwrap_or_default()
    }
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            max,
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Content-derived request id; identical requests share an id.
pub fn request_id<T: Serialize>(endpoint: &str, body: &T) -> String {
    let mut hasher = Sha256::new();
    hasher.update(endpoint.as_bytes());
    hasher.update([0]);
    hasher.update(serde_json::to_vec(body).expect("request serialization is infallible"));
    hex::encode(&hasher.finalize()[..12])
}

/// Contract-enforcing front end over a [`LanguageModel`]. Shareable across
/// threads.
pub struct Client {
    model: Arc<dyn LanguageModel>,
    budget: BackendBudget,
    limiter: Limiter,
    audit: Option<Arc<AuditLog>>,
    accounted: Mutex<BTreeSet<String>>,
}

impl Client {
    pub fn new(model: Arc<dyn LanguageModel>, budget: BackendBudget) -> Result<Self> {
        budget.validate()?;
        Ok(Self {
            model,
            limiter: Limiter::new(budget.max_concurrent),
            budget,
            audit: None,
            accounted: Mutex::new(BTreeSet::new()),
        })
    }

    pub fn with_audit(mut self, audit: Arc<AuditLog>) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn budget(&self) -> &BackendBudget {
        &self.budget
    }

    pub fn model_name(&self) -> &str {
        self.model.name()
    }

    pub fn audit(&self) -> Option<&Arc<AuditLog>> {
        self.audit.as_ref()
    }

    /// Number of distinct request ids that produced an accounted response.
    pub fn accounted_requests(&self) -> usize {
        self.accounted.lock().unwrap().len()
    }

    fn record(&self, entry: AuditEntry) {
        if let Some(audit) = &self.audit {
            audit.append(&entry);
        }
    }

    fn call<T, F>(&self, endpoint: &'static str, id: &str, payload: serde_json::Value, op: F) -> Result<T>
    where
        T: Serialize,
        F: Fn() -> Result<T>,
    {
        let mut attempt = 0u32;
        loop {
            self.record(AuditEntry::request(endpoint, id, attempt, payload.clone()));
            let outcome = {
                let _permit = self.limiter.acquire();
                op()
            };
            match outcome {
                Ok(value) => {
                    self.accounted.lock().unwrap().insert(id.to_string());
                    self.record(AuditEntry::response(
                        endpoint,
                        id,
                        attempt,
                        serde_json::to_value(&value).unwrap_or_default(),
                    ));
                    return Ok(value);
                }
                Err(err) => {
                    self.record(AuditEntry::error(endpoint, id, attempt, &err));
                    if !err.is_retryable() || attempt >= self.budget.max_retries {
                        log::warn!("{endpoint} request {id} failed after {} attempt(s): {err}", attempt + 1);
                        return Err(err);
                    }
                    let delay = self.budget.backoff(attempt);
                    log::debug!("{endpoint} request {id} retrying in {delay:?}: {err}");
                    thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }

    /// Exactly `request.n` completions.
    pub fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>> {
        request.validate()?;
        let id = request_id("generate", request);
        let payload = serde_json::to_value(request).unwrap_or_default();
        let completions = self.call("generate", &id, payload, || self.model.complete(request))?;
        if completions.len() != request.n {
            return Err(BackendError::refusal(format!(
                "requested {} completions, backend returned {}",
                request.n,
                completions.len()
            )));
        }
        Ok(completions)
    }

    /// Per-word log-probabilities as reported, clamped to `<= 0`.
    pub fn token_log_probs(&self, query: &LogProbQuery) -> Result<Vec<f64>> {
        query.validate()?;
        let id = request_id("log_prob", query);
        let payload = json!({
            "model_ref": query.model_ref,
            "context_sha256": hex::encode(Sha256::digest(query.context.as_bytes())),
            "continuation": query.continuation,
        });
        let values = self.call("log_prob", &id, payload, || {
            let values = self.model.continuation_log_probs(query)?;
            if values.len() != query.continuation.len() {
                return Err(BackendError::Unsupported(format!(
                    "backend scored {} of {} continuation words",
                    values.len(),
                    query.continuation.len()
                )));
            }
            // JSON has no infinities; the sentinel stands in for them in the log.
            Ok(values
                .into_iter()
                .map(|v| if v.is_nan() || v == f64::NEG_INFINITY { ZERO_MASS_LOG_PROB } else { v.min(0.0) })
                .collect::<Vec<f64>>())
        })?;
        Ok(values)
    }

    /// `ln P(continuation | context)`, summed left to right over the words.
    /// Collapses to [`ZERO_MASS_LOG_PROB`] when any word has zero mass.
    pub fn log_prob(&self, query: &LogProbQuery) -> Result<f64> {
        let values = self.token_log_probs(query)?;
        if values.iter().any(|&v| v <= ZERO_MASS_LOG_PROB) {
            return Ok(ZERO_MASS_LOG_PROB);
        }
        let total = values.iter().fold(0.0, |acc, &v| acc + v);
        Ok(total.max(ZERO_MASS_LOG_PROB))
    }

    /// Validates the dataset, then runs the fine-tune job.
    pub fn submit_finetune(&self, dataset: &Path, base_model: &str) -> Result<String> {
        self.submit_finetune_with(dataset, base_model, finetune::DEFAULT_EPOCHS)
    }

    pub fn submit_finetune_with(&self, dataset: &Path, base_model: &str, epochs: u32) -> Result<String> {
        finetune::validate_file(dataset).map_err(|e| BackendError::Precondition(e.to_string()))?;
        let job = FineTuneJob {
            dataset: dataset.to_path_buf(),
            base_model: base_model.to_string(),
            epochs,
        };
        let digest = std::fs::read(dataset)
            .map(|bytes| hex::encode(Sha256::digest(&bytes)))
            .map_err(|e| BackendError::Precondition(e.to_string()))?;
        let id = request_id("fine_tune", &(&base_model, &digest, epochs));
        let payload = json!({
            "base_model": base_model,
            "dataset_sha256": digest,
            "epochs": epochs,
        });
        self.call("fine_tune", &id, payload, || self.model.fine_tune(&job))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{MockBackend, TableModel};

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn extend_context_is_associative() {
        let a = extend_context("X", &words(&["a", "b", "c"]));
        let b = extend_context(&extend_context("X", &words(&["a"])), &words(&["b", "c"]));
        assert_eq!(a, "X a b c");
        assert_eq!(a, b);
        assert_eq!(extend_context("X\n", &words(&["a"])), "X\na");
        assert_eq!(extend_context("", &words(&["a", "b"])), "a b");
    }

    #[test]
    fn log_prob_sums_table_conditionals() {
        let table = TableModel::new(1.0)
            .with("X", "a", 0.5)
            .with("X a", "b", 0.25);
        let client = MockBackend::new(0).with_scorer(table).into_client();
        let q = LogProbQuery::new("X", words(&["a", "b"]), "s");
        let lp = client.log_prob(&q).unwrap();
        assert!((lp - 0.125f64.ln()).abs() < 1e-12, "{lp}");
        assert!((lp + 2.0794).abs() < 1e-4);
    }

    #[test]
    fn certain_and_impossible_tokens() {
        let table = TableModel::new(1.0).with("X a", "z", 0.0);
        let client = MockBackend::new(0).with_scorer(table).into_client();
        assert_eq!(client.log_prob(&LogProbQuery::new("X", words(&["a"]), "s")).unwrap(), 0.0);
        assert_eq!(
            client.log_prob(&LogProbQuery::new("X", words(&["a", "z"]), "s")).unwrap(),
            ZERO_MASS_LOG_PROB
        );
    }

    #[test]
    fn empty_continuation_is_rejected() {
        let client = MockBackend::new(0).into_client();
        assert!(matches!(
            client.log_prob(&LogProbQuery::new("X", vec![], "s")),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn generation_contract() {
        let client = MockBackend::new(0)
            .with_completions("p", ["a", "b"])
            .into_client();
        let req = |n| GenerationRequest {
            prompt: "p".into(),
            max_tokens: 16,
            temperature: 0.7,
            n,
            model_ref: "m0".into(),
        };
        assert_eq!(client.generate(&req(2)).unwrap(), ["a", "b"]);
        assert!(matches!(client.generate(&req(3)), Err(BackendError::Refusal { .. })));
        assert!(matches!(client.generate(&req(0)), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn transport_failures_are_retried_and_accounted_once() {
        let audit = Arc::new(AuditLog::in_memory());
        let mock = MockBackend::new(0).with_completions("p", ["a"]);
        mock.inject_transport_failures(2);
        let budget = BackendBudget {
            retry_backoff: vec![Duration::ZERO],
            ..BackendBudget::default()
        };
        let client = Client::new(Arc::new(mock), budget).unwrap().with_audit(audit.clone());
        let req = GenerationRequest {
            prompt: "p".into(),
            max_tokens: 8,
            temperature: 0.0,
            n: 1,
            model_ref: "m0".into(),
        };
        assert_eq!(client.generate(&req).unwrap(), ["a"]);
        let entries = audit.entries();
        assert_eq!(entries.iter().filter(|e| e.event == "request").count(), 3);
        assert_eq!(entries.iter().filter(|e| e.event == "error").count(), 2);
        assert_eq!(entries.iter().filter(|e| e.event == "response").count(), 1);
        assert_eq!(client.accounted_requests(), 1);
    }

    #[test]
    fn retries_are_bounded() {
        let mock = MockBackend::new(0).with_completions("p", ["a"]);
        mock.inject_transport_failures(10);
        let budget = BackendBudget {
            max_retries: 1,
            retry_backoff: vec![Duration::ZERO],
            ..BackendBudget::default()
        };
        let client = Client::new(Arc::new(mock), budget).unwrap();
        let req = GenerationRequest {
            prompt: "p".into(),
            max_tokens: 8,
            temperature: 0.0,
            n: 1,
            model_ref: "m0".into(),
        };
        assert!(matches!(client.generate(&req), Err(BackendError::Transport(_))));
    }

    #[test]
    fn zero_concurrency_is_rejected() {
        let budget = BackendBudget {
            max_concurrent: 0,
            ..BackendBudget::default()
        };
        assert!(Client::new(Arc::new(MockBackend::new(0)), budget).is_err());
    }
}
