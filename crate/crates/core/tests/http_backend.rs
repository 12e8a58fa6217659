use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use narrator_core::backend::http::{HttpBackend, HttpConfig};
use narrator_core::backend::{BackendBudget, BackendError, Client, GenerationRequest, LogProbQuery};
use narrator_core::finetune::{self, Record};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    method: String,
    path: String,
    authorization: Option<String>,
    body: String,
}

type Handler = dyn Fn(&Seen) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server answering one request per connection.
fn serve(handler: Arc<Handler>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let log = Arc::new(Mutex::new(Vec::new()));
    let seen_log = log.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).is_err() {
                continue;
            }
            let mut parts = request_line.split_whitespace();
            let method = parts.next().unwrap_or_default().to_string();
            let path = parts.next().unwrap_or_default().to_string();
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let seen = Seen {
                method,
                path,
                authorization,
                body: String::from_utf8_lossy(&body).into_owned(),
            };
            seen_log.lock().unwrap().push(seen.clone());
            let (status, text) = handler(&seen);
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    (base, log)
}

fn client(base: &str, key: Option<&str>) -> Client {
    let mut config = HttpConfig::new(base);
    config.api_key = key.map(str::to_string);
    config.poll_interval = Duration::ZERO;
    config.request_timeout = Duration::from_secs(10);
    let budget = BackendBudget {
        retry_backoff: vec![Duration::ZERO],
        ..BackendBudget::default()
    };
    Client::new(Arc::new(HttpBackend::new(config).unwrap()), budget).unwrap()
}

/// Echoes the prompt as tokens that each start at a word boundary or mid-word,
/// every token worth -0.25.
fn echo(prompt: &str) -> Value {
    let mut tokens = Vec::new();
    let mut offsets = Vec::new();
    let chars: Vec<char> = prompt.chars().collect();
    let mut start = 0;
    while start < chars.len() {
        // Two-character pieces, so longer words span several tokens.
        let end = (start + 2).min(chars.len());
        tokens.push(chars[start..end].iter().collect::<String>());
        offsets.push(start);
        start = end;
    }
    let logprobs: Vec<Value> =
        (0..tokens.len()).map(|i| if i == 0 { Value::Null } else { json!(-0.25) }).collect();
    json!({"choices": [{"text": "", "logprobs": {"tokens": tokens, "token_logprobs": logprobs, "text_offset": offsets}}]})
}

#[test]
fn generation_orders_choices_and_sends_the_key() {
    let (base, log) = serve(Arc::new(|_| {
        (
            200,
            json!({"choices": [
                {"index": 1, "message": {"content": "second"}},
                {"index": 0, "message": {"content": "first"}}
            ]})
            .to_string(),
        )
    }));
    let c = client(&base, Some("test-key"));
    let out = c
        .generate(&GenerationRequest {
            prompt: "explain".into(),
            max_tokens: 16,
            temperature: 0.7,
            n: 2,
            model_ref: "gen".into(),
        })
        .unwrap();
    assert_eq!(out, ["first", "second"]);
    let seen = log.lock().unwrap();
    assert_eq!(seen[0].method, "POST");
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer test-key"));
    let body: Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["n"], 2);
    assert_eq!(body["model"], "gen");
}

#[test]
fn echoed_logprobs_fold_onto_words() {
    let (base, log) = serve(Arc::new(|seen| {
        let body: Value = serde_json::from_str(&seen.body).unwrap();
        (200, echo(body["prompt"].as_str().unwrap()).to_string())
    }));
    let c = client(&base, None);
    // The prompt is "ctx\nalpha beta". Tokens start at even offsets: 4, 6, 8
    // fall in "alpha" (ends at 9), 10 and 12 in " beta" (ends at 14).
    let words = vec!["alpha".to_string(), "beta".to_string()];
    let per_word = c.token_log_probs(&LogProbQuery::new("ctx\n", words.clone(), "s")).unwrap();
    assert_eq!(per_word, vec![-0.75, -0.5]);
    assert_eq!(c.log_prob(&LogProbQuery::new("ctx\n", words, "s")).unwrap(), -1.25);
    let seen = log.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/completions");
    assert!(seen[0].authorization.is_none());
    let body: Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["prompt"], "ctx\nalpha beta");
    assert_eq!(body["echo"], true);
}

#[test]
fn server_errors_are_retried_and_client_errors_are_not() {
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    let (base, _) = serve(Arc::new(move |seen| {
        if counter.fetch_add(1, Ordering::SeqCst) < 2 {
            return (503, "{}".into());
        }
        let body: Value = serde_json::from_str(&seen.body).unwrap();
        (200, echo(body["prompt"].as_str().unwrap()).to_string())
    }));
    let c = client(&base, None);
    let q = LogProbQuery::new("x ", vec!["yy".into()], "s");
    assert_eq!(c.log_prob(&q).unwrap(), -0.25);
    assert_eq!(calls.load(Ordering::SeqCst), 3);

    let (base, log) = serve(Arc::new(|_| (400, "{\"error\":\"bad\"}".into())));
    let err = client(&base, None).log_prob(&q).unwrap_err();
    assert!(matches!(err, BackendError::Refusal { status: Some(400), .. }), "{err:?}");
    assert_eq!(log.lock().unwrap().len(), 1);
}

#[test]
fn fine_tune_uploads_creates_and_polls() {
    let polls = Arc::new(AtomicUsize::new(0));
    let counter = polls.clone();
    let (base, log) = serve(Arc::new(move |seen| match (seen.method.as_str(), seen.path.as_str()) {
        ("POST", "/v1/files") => (200, json!({"id": "file-1"}).to_string()),
        ("POST", "/v1/fine_tuning/jobs") => (200, json!({"id": "job-1", "status": "queued"}).to_string()),
        ("GET", "/v1/fine_tuning/jobs/job-1") => {
            let status = if counter.fetch_add(1, Ordering::SeqCst) == 0 { "running" } else { "succeeded" };
            (200, json!({"id": "job-1", "status": status, "fine_tuned_model": "ft:gen:1"}).to_string())
        }
        _ => (404, "{}".into()),
    }));
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("train.jsonl");
    finetune::write_file(&dataset, &[Record::exchange("prompt", "answer")]).unwrap();
    let model = client(&base, None).submit_finetune_with(&dataset, "gen", 2).unwrap();
    assert_eq!(model, "ft:gen:1");
    assert_eq!(polls.load(Ordering::SeqCst), 2);
    let seen = log.lock().unwrap();
    assert!(seen[0].body.contains("\"answer\""));
    let job: Value = serde_json::from_str(&seen[1].body).unwrap();
    assert_eq!(job["training_file"], "file-1");
    assert_eq!(job["hyperparameters"]["n_epochs"], 2);
}

#[test]
fn failed_job_reports_the_provider_message() {
    let (base, _) = serve(Arc::new(|seen| match seen.path.as_str() {
        "/v1/files" => (200, json!({"id": "f"}).to_string()),
        _ => (
            200,
            json!({"id": "j", "status": "failed", "error": {"message": "quota exceeded"}}).to_string(),
        ),
    }));
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("train.jsonl");
    finetune::write_file(&dataset, &[Record::exchange("p", "a")]).unwrap();
    let err = client(&base, None).submit_finetune(&dataset, "gen").unwrap_err();
    assert_eq!(err, BackendError::JobFailed("quota exceeded".into()));
}
