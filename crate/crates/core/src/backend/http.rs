//! OpenAI-compatible HTTP provider.
//!
//! * generation: `POST /v1/chat/completions`
//! * scoring: `POST /v1/completions` with `echo` and `logprobs`, mapping the
//!   provider's sub-word tokens back onto whitespace words by character offset
//! * fine-tuning: file upload, `POST /v1/fine_tuning/jobs`, then polling

use std::thread;
use std::time::Duration;

use reqwest::blocking::{multipart, Client as HttpClient, RequestBuilder};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    extend_context, BackendError, FineTuneJob, GenerationRequest, LanguageModel, LogProbQuery,
    Result,
};

pub const API_KEY_ENV: &str = "NARRATOR_API_KEY";
pub const API_BASE_ENV: &str = "NARRATOR_API_BASE";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Server root, without the `/v1` suffix.
    pub base_url: String,
    pub api_key: Option<String>,
    pub request_timeout: Duration,
    pub poll_interval: Duration,
    /// Upper bound on polls of one fine-tune job.
    pub max_polls: u32,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            request_timeout: Duration::from_secs(120),
            poll_interval: Duration::from_secs(30),
            max_polls: 2880,
        }
    }

    /// Base URL and key from `NARRATOR_API_BASE` / `NARRATOR_API_KEY`, with
    /// `fallback_base` used when the variable is unset.
    pub fn from_env(fallback_base: Option<&str>) -> Result<Self> {
        let base = std::env::var(API_BASE_ENV)
            .ok()
            .or_else(|| fallback_base.map(str::to_string))
            .ok_or_else(|| {
                BackendError::InvalidRequest(format!("{API_BASE_ENV} is not set and no base URL was configured"))
            })?;
        let mut cfg = Self::new(base);
        cfg.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    http: HttpClient,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    #[serde(default)]
    index: usize,
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    #[serde(default)]
    logprobs: Option<EchoLogprobs>,
}

#[derive(Deserialize)]
struct EchoLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

#[derive(Deserialize)]
struct FileObject {
    id: String,
}

#[derive(Deserialize)]
struct JobObject {
    id: String,
    status: String,
    #[serde(default)]
    fine_tuned_model: Option<String>,
    #[serde(default)]
    error: Option<Value>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let http = HttpClient::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self { config, http })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/v1/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn authorized(&self, builder: RequestBuilder) -> RequestBuilder {
        match &self.config.api_key {
            Some(key) => builder.bearer_auth(key),
            None => builder,
        }
    }

    fn send<T: for<'de> Deserialize<'de>>(&self, builder: RequestBuilder) -> Result<T> {
        let response = self.authorized(builder).send().map_err(classify)?;
        let status = response.status();
        let body = response.text().map_err(classify)?;
        if status.is_client_error() && status.as_u16() != 429 {
            return Err(BackendError::Refusal {
                status: Some(status.as_u16()),
                body,
            });
        }
        if !status.is_success() {
            return Err(BackendError::Transport(format!("HTTP {status}: {body}")));
        }
        serde_json::from_str(&body)
            .map_err(|e| BackendError::Transport(format!("malformed response body: {e}")))
    }

    fn poll_job(&self, mut job: JobObject) -> Result<String> {
        for _ in 0..self.config.max_polls {
            match job.status.as_str() {
                "succeeded" => {
                    return job.fine_tuned_model.ok_or_else(|| {
                        BackendError::JobFailed(format!("job {} succeeded without a model id", job.id))
                    })
                }
                "failed" | "cancelled" => {
                    let message = job
                        .error
                        .as_ref()
                        .and_then(|e| e.get("message"))
                        .and_then(Value::as_str)
                        .map(str::to_string)
                        .unwrap_or_else(|| job.status.clone());
                    return Err(BackendError::JobFailed(message));
                }
                _ => {}
            }
            thread::sleep(self.config.poll_interval);
            job = self.send(self.http.get(self.url(&format!("fine_tuning/jobs/{}", job.id))))?;
        }
        Err(BackendError::Budget(format!("fine-tune job {} did not finish", job.id)))
    }
}

fn classify(err: reqwest::Error) -> BackendError {
    if err.is_timeout() {
        BackendError::Budget(err.to_string())
    } else {
        BackendError::Transport(err.to_string())
    }
}

/// Sums sub-token log-probs into one value per continuation word.
///
/// `context_chars` is the character length of the context inside the echoed
/// prompt; `word_ends` the character offset at which each word ends. A
/// sub-token belongs to the first word whose end lies beyond its start.
fn fold_echo(echo: &EchoLogprobs, context_chars: usize, word_ends: &[usize]) -> Result<Vec<f64>> {
    if echo.token_logprobs.len() != echo.tokens.len() || echo.text_offset.len() != echo.tokens.len() {
        return Err(BackendError::Unsupported("inconsistent logprobs arrays".into()));
    }
    let total = *word_ends.last().unwrap_or(&context_chars);
    let mut sums = vec![0.0; word_ends.len()];
    let mut seen = vec![false; word_ends.len()];
    for (&offset, lp) in echo.text_offset.iter().zip(&echo.token_logprobs) {
        if offset < context_chars || offset >= total {
            continue;
        }
        let word = word_ends.iter().position(|&end| offset < end).expect("offset < total");
        let lp = lp.ok_or_else(|| BackendError::Unsupported("missing log-prob for a continuation token".into()))?;
        sums[word] += lp;
        seen[word] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(BackendError::Unsupported(format!(
            "no provider token starts inside continuation word {i}"
        )));
    }
    Ok(sums)
}

impl LanguageModel for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &GenerationRequest) -> Result<Vec<String>> {
        let body = json!({
            "model": request.model_ref,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "n": request.n,
        });
        let mut response: ChatResponse = self.send(self.http.post(self.url("chat/completions")).json(&body))?;
        response.choices.sort_by_key(|c| c.index);
        Ok(response
            .choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect())
    }

    fn continuation_log_probs(&self, query: &LogProbQuery) -> Result<Vec<f64>> {
        let prompt = extend_context(&query.context, &query.continuation);
        let context_chars = query.context.chars().count();
        let mut word_ends = Vec::with_capacity(query.continuation.len());
        let mut cursor = context_chars;
        let mut text = query.context.clone();
        for w in &query.continuation {
            let before = text.chars().count();
            text = extend_context(&text, std::slice::from_ref(w));
            cursor += text.chars().count() - before;
            word_ends.push(cursor);
        }
        debug_assert_eq!(text, prompt);

        let body = json!({
            "model": query.model_ref,
            "prompt": prompt,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 1,
        });
        let response: CompletionResponse = self.send(self.http.post(self.url("completions")).json(&body))?;
        let echo = response
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| BackendError::Unsupported("response carries no logprobs".into()))?;
        fold_echo(&echo, context_chars, &word_ends)
    }

    fn fine_tune(&self, job: &FineTuneJob) -> Result<String> {
        let form = multipart::Form::new()
            .text("purpose", "fine-tune")
            .file("file", &job.dataset)
            .map_err(|e| BackendError::Precondition(e.to_string()))?;
        let file: FileObject = self.send(self.http.post(self.url("files")).multipart(form))?;
        let body = json!({
            "model": job.base_model,
            "training_file": file.id,
            "hyperparameters": {"n_epochs": job.epochs},
        });
        let created: JobObject = self.send(self.http.post(self.url("fine_tuning/jobs")).json(&body))?;
        self.poll_job(created)
    }
}
