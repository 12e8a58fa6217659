use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use narrator_core::backend::mock::MockBackend;
use narrator_core::backend::{AuditLog, BackendBudget, Client};
use narrator_core::finetune;
use narrator_core::iteration::{
    export_finetune_dataset, initial_state, ExportStyle, GenerationOptions, IterationError, RunPaths, Runner,
    ScoreLogLine,
};
use narrator_core::synthetic::{simulated_mock, synthesize, SyntheticConfig};
use narrator_core::{ExplanationInstance, IterationConfig, IterationState, ScoringContext, SelectionStrategy};

const SEED: u64 = 17;

fn budget() -> BackendBudget {
    BackendBudget {
        retry_backoff: vec![Duration::ZERO],
        ..BackendBudget::default()
    }
}

fn backend(dir: &Path) -> Arc<MockBackend> {
    Arc::new(simulated_mock(SEED, Some(&dir.join("registry.json"))).unwrap())
}

fn client(mock: &Arc<MockBackend>) -> Client {
    Client::new(mock.clone(), budget()).unwrap()
}

fn config() -> IterationConfig {
    IterationConfig {
        iterations: 3,
        strategy: SelectionStrategy::BalancedTopFraction { fraction: 0.5, quota: 8 },
        ..IterationConfig::default()
    }
}

fn dataset() -> Vec<ExplanationInstance> {
    synthesize(SEED, 6, &SyntheticConfig::default())
}

fn run(dir: &Path, mock: &Arc<MockBackend>, resume: bool) -> Result<IterationState, IterationError> {
    let client = client(mock);
    let scoring = ScoringContext::<f64>::new("scorer");
    let config = config();
    let paths = RunPaths::new(dir);
    let runner = Runner {
        client: &client,
        scoring: &scoring,
        config: &config,
        paths: &paths,
    };
    let mut state = initial_state(&paths, "m0", resume)?;
    runner.run_loop(&dataset(), &mut state)?;
    Ok(state)
}

#[test]
fn resume_after_failed_finetune_matches_uninterrupted_run() {
    let clean = tempfile::tempdir().unwrap();
    let expected = run(clean.path(), &backend(clean.path()), false).unwrap();
    assert_eq!(expected.iteration, 3);
    assert_eq!(expected.generator_model, "m0@ft1@ft2@ft3");

    let broken = tempfile::tempdir().unwrap();
    let mock = backend(broken.path());
    mock.inject_job_failures(1);
    assert!(run(broken.path(), &mock, false).is_err());
    let checkpoint = IterationState::<f64>::load(&broken.path().join("state.json")).unwrap();
    assert!(checkpoint.pending_finetune.is_some());
    assert_eq!(checkpoint.iteration, 0);

    // A fresh process: new backend reading the same registry.
    let resumed = run(broken.path(), &backend(broken.path()), true).unwrap();
    assert_eq!(resumed, expected);
    for file in ["scores.jsonl", "state.json", "registry.json", "finetune/generator-iter01.jsonl"] {
        assert_eq!(
            fs::read(clean.path().join(file)).unwrap(),
            fs::read(broken.path().join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn crash_while_scoring_reruns_the_iteration_cleanly() {
    let clean = tempfile::tempdir().unwrap();
    let expected = run(clean.path(), &backend(clean.path()), false).unwrap();

    let broken = tempfile::tempdir().unwrap();
    let mock = backend(broken.path());
    // Enough consecutive failures to exhaust one request's retries.
    mock.inject_transport_failures(budget().max_retries as usize + 1);
    let crashed = run(broken.path(), &mock, false);
    assert!(matches!(crashed, Err(IterationError::Backend(_))), "{crashed:?}");

    let resumed = run(broken.path(), &backend(broken.path()), true).unwrap();
    assert_eq!(resumed, expected);
    assert_eq!(
        fs::read(clean.path().join("scores.jsonl")).unwrap(),
        fs::read(broken.path().join("scores.jsonl")).unwrap()
    );
}

#[test]
fn stats_agree_with_the_score_log() {
    let dir = tempfile::tempdir().unwrap();
    let state = run(dir.path(), &backend(dir.path()), false).unwrap();
    let text = fs::read_to_string(dir.path().join("scores.jsonl")).unwrap();
    let lines: Vec<ScoreLogLine> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(state.score_stats.len(), 3);
    for stats in &state.score_stats {
        let rows: Vec<&ScoreLogLine> = lines.iter().filter(|l| l.iteration == stats.iteration).collect();
        assert_eq!(rows.len(), stats.candidates);
        assert!(rows.iter().all(|r| r.generator_model == stats.generator_model));
        let mean = |f: fn(&ScoreLogLine) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
        assert!((mean(|r| r.f_s) - stats.mean.f_s).abs() < 1e-12);
        assert!((mean(|r| r.f_f) - stats.mean.f_f).abs() < 1e-12);
        assert!((mean(|r| r.f_b) - stats.mean.f_b).abs() < 1e-12);
        assert!(stats.selected <= 8);
    }
    assert_eq!(
        state.accumulated.len(),
        state.score_stats.iter().map(|s| s.selected).sum::<usize>()
    );
}

#[test]
fn distillation_export_is_plain_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let state = run(dir.path(), &backend(dir.path()), false).unwrap();
    let instances: BTreeMap<String, ExplanationInstance> =
        dataset().into_iter().map(|i| (i.instance_id().to_string(), i)).collect();
    let options = GenerationOptions::default();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    export_finetune_dataset(&state.accumulated, &instances, ExportStyle::Distillation, &options, &a).unwrap();
    export_finetune_dataset(&state.accumulated, &instances, ExportStyle::Distillation, &options, &b).unwrap();
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());

    let scored = regex::Regex::new(r"\(\d+\.\d\d\)").unwrap();
    let records = finetune::read_file(&a).unwrap();
    assert_eq!(records.len(), state.accumulated.len());
    for r in &records {
        for m in &r.messages {
            assert!(!scored.is_match(&m.content), "{}", m.content);
        }
    }
    // The generator files, by contrast, show scores.
    let generator = fs::read_to_string(dir.path().join("finetune/generator-iter00.jsonl")).unwrap();
    assert!(scored.is_match(&generator));
}

#[test]
fn audit_log_records_every_scoring_call() {
    let dir = tempfile::tempdir().unwrap();
    let audit = Arc::new(AuditLog::open(&dir.path().join("audit.jsonl")).unwrap());
    let mock = backend(dir.path());
    let client = client(&mock).with_audit(audit);
    let scoring = ScoringContext::<f64>::new("scorer");
    let config = IterationConfig { iterations: 1, ..config() };
    let paths = RunPaths::new(dir.path());
    let runner = Runner {
        client: &client,
        scoring: &scoring,
        config: &config,
        paths: &paths,
    };
    let mut state = IterationState::new("m0");
    runner.run_loop(&dataset(), &mut state).unwrap();
    let entries = AuditLog::read_file(&dir.path().join("audit.jsonl")).unwrap();
    let text = fs::read_to_string(dir.path().join("audit.jsonl")).unwrap();
    assert_eq!(entries.len(), text.lines().count());
    // Per candidate: 6 τ points and one label query, each with and without E.
    let log_prob_requests = text.lines().filter(|l| l.contains("\"log_prob\"") && l.contains("\"request\"")).count();
    assert_eq!(log_prob_requests, 6 * 4 * (6 + 1) * 2);
}
