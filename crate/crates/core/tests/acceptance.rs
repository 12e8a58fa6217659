//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p narrator-core --test acceptance -- --nocapture`.

mod common;

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use common::{
    arb_instance, explanation_shown, fill_table, label_audit, node_of, oracle_tree, passing_by_enumeration,
    rationale_oracle, staged, twenty_token_instance, LABEL_SET,
};
use narrator_core::backend::mock::{HashedModel, MockBackend, OverlapModel};
use narrator_core::backend::{extend_context, BackendBudget, Client, LogProbQuery};
use narrator_core::evaluation::{emit_report, evaluate, simulatability};
use narrator_core::iteration::{export_finetune_dataset, initial_state, ExportStyle, RunPaths, Runner};
use narrator_core::measures::{score_all, score_input_faithfulness, score_prediction_faithfulness};
use narrator_core::selection::{select_indices, SelectionError};
use narrator_core::synthetic::{simulated_mock, synthesize, SyntheticConfig, LABELS};
use narrator_core::verbalizer::{build_bfs_tree, build_masked_instance, parse_paragraph, render_paragraph};
use narrator_core::{
    EvalRecord, ExplanationInstance, IterationConfig, IterationState, NodeId, ScoreTriple, ScoringContext,
    SelectionStrategy, TauDistribution,
};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::TestRunner;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Ledger {
    failed: Vec<&'static str>,
}

impl Ledger {
    fn record(&mut self, name: &'static str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(name);
        }
    }
}

fn sample<S: Strategy>(strategy: &S, runner: &mut TestRunner) -> S::Value {
    strategy.new_tree(runner).unwrap().current()
}

fn round_trips(inst: &ExplanationInstance, k: usize, scored: bool) -> bool {
    let tree = build_bfs_tree(inst, k);
    let Ok(sections) = parse_paragraph(&render_paragraph(&tree, inst, scored).text) else {
        return false;
    };
    let node = |t: &str| node_of(t.split('(').next().unwrap());
    let mut by_path = BTreeMap::new();
    for s in &sections {
        let v = node(&s.tokens[0]);
        if s.tokens.iter().any(|t| node(t) != v)
            || s.tokens.len() != inst.graph().node(v).tokens.len()
            || by_path.insert(s.path.clone(), v).is_some()
        {
            return false;
        }
    }
    let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    let mut cross = BTreeSet::new();
    for s in &sections {
        let v = by_path[&s.path];
        if let Some(parent) = s.parent_path() {
            children.entry(by_path[parent]).or_default().push(v);
        }
        for r in &s.references {
            match by_path.get(r) {
                Some(&w) => cross.insert((v, w)),
                None => return false,
            };
        }
    }
    let oracle = oracle_tree(inst, k);
    children == oracle.children && cross == oracle.cross && tree.cross_edges() == &oracle.cross
}

fn verbalization_round_trip(ledger: &mut Ledger) {
    let mut runner = TestRunner::deterministic();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let strategy = arb_instance(50);
    let start = Instant::now();
    let failures = (0..200)
        .filter(|_| {
            let inst = sample(&strategy, &mut runner);
            !round_trips(&inst, rng.gen_range(1..=3), rng.gen())
        })
        .count();
    let elapsed = start.elapsed();
    ledger.record(
        "verbalization round trip",
        failures == 0 && elapsed < Duration::from_secs(5),
        format!("200 graphs, {failures} failures, {:.2}s", elapsed.as_secs_f64()),
    );
}

fn masking_oracle(ledger: &mut Ledger) {
    let mut runner = TestRunner::deterministic();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let strategy = arb_instance(30);
    let mut failures = 0;
    for _ in 0..200 {
        let inst = sample(&strategy, &mut runner);
        let k = rng.gen_range(1..=3);
        let tree = build_bfs_tree(&inst, k);
        for percent in [5usize, 10, 15, 20, 25, 30] {
            let got: BTreeSet<(NodeId, usize)> = build_masked_instance(&inst, k, percent as f64 / 100.0)
                .unwrap()
                .rationale_tokens
                .iter()
                .map(|t| (t.node, t.index))
                .collect();
            if got != rationale_oracle(&inst, &tree, percent) {
                failures += 1;
            }
        }
    }
    ledger.record(
        "masking oracle",
        failures == 0,
        format!("200 instances x 6 thresholds, {failures} mismatches"),
    );
}

fn log_prob_additivity(ledger: &mut Ledger) {
    let mut runner = TestRunner::deterministic();
    let words = || prop::collection::vec("[a-z]{1,6}", 1..5);
    let strategy = ("[a-z]{0,8}( [a-z]{1,8}){0,6}\n?", words(), words(), any::<u64>());
    let mut failures = 0;
    for _ in 0..1000 {
        let (x, y1, y2, seed) = sample(&strategy, &mut runner);
        let client = MockBackend::new(seed).with_scorer(HashedModel::new(seed)).into_client();
        let q = |ctx: &str, w: &[String]| LogProbQuery::new(ctx, w.to_vec(), "m");
        let joint: Vec<String> = y1.iter().chain(&y2).cloned().collect();
        let whole = client.log_prob(&q(&x, &joint)).unwrap();
        let split = client.log_prob(&q(&x, &y1)).unwrap() + client.log_prob(&q(&extend_context(&x, &y1), &y2)).unwrap();
        if whole.to_bits() != split.to_bits() {
            failures += 1;
        }
    }
    ledger.record(
        "log-prob decomposition",
        failures == 0,
        format!("1000 triples, {failures} not bitwise equal"),
    );
}

fn input_faithfulness_quadrature(ledger: &mut Ledger) {
    let inst = twenty_token_instance();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let probs: Vec<(usize, f64, f64)> =
            (1..=6).map(|m| (m, rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0))).collect();
        let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let expected: f64 = probs
            .iter()
            .zip(&weights)
            .map(|(&(_, with, without), w)| w * (with.ln() - without.ln()))
            .sum();
        let tau = TauDistribution::new(vec![0.05, 0.10, 0.15, 0.20, 0.25, 0.30], weights).unwrap();
        let client = staged(fill_table(&probs), [0.5, 0.5], None);
        let ctx = ScoringContext::new("scorer").with_tau(tau);
        let f_s = score_input_faithfulness(&client, &inst, "e", &ctx).unwrap();
        worst = worst.max((f_s - expected).abs());
    }
    let flat = fill_table(&(1..=6).map(|m| (m, 0.37, 0.37)).collect::<Vec<_>>());
    let independent = score_all(&staged(flat, [0.3, 0.3], None), &inst, "e", &ScoringContext::<f64>::new("s")).unwrap();
    ledger.record(
        "input faithfulness quadrature",
        worst < 1e-12 && independent.f_s == 0.0,
        format!("50 tables, max error {worst:.1e}; independence f_S = {}", independent.f_s),
    );
}

fn prediction_faithfulness(ledger: &mut Ledger) {
    let inst = twenty_token_instance();
    let ctx = ScoringContext::<f64>::new("scorer");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (without, with) = (rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0));
        let client = staged(BTreeMap::new(), [without, with], None);
        let f_f = score_prediction_faithfulness(&client, &inst, "cites theory papers", &ctx).unwrap();
        worst = worst.max((f_f - (with.ln() - without.ln())).abs());
    }

    let audit = label_audit(&LABEL_SET);
    let pieces = ["Theory", "neural NETWORKS", "rule learning", "TheoryTheory", "Rule Rule Learning Learning", "graph", "."];
    let mut hits = 0;
    for _ in 0..300 {
        let n = rng.gen_range(1..10);
        let glue = ["", " ", "-"][rng.gen_range(0..3)];
        let explanation: Vec<&str> = (0..n).map(|_| pieces[rng.gen_range(0..pieces.len())]).collect();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let client = staged(BTreeMap::new(), [0.3, 0.9], Some(seen.clone()));
        score_prediction_faithfulness(&client, &inst, &explanation.join(glue), &ctx).unwrap();
        hits += seen
            .lock()
            .unwrap()
            .iter()
            .filter_map(|p| explanation_shown(p))
            .filter(|shown| audit.is_match(shown))
            .count();
    }
    ledger.record(
        "prediction faithfulness",
        worst < 1e-12 && hits == 0,
        format!("50 ratios, max error {worst:.1e}; label audit over 300 explanations, {hits} hits"),
    );
}

fn selection_equivalence(ledger: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let strategy = SelectionStrategy::BalancedTopFraction { fraction: 0.5, quota: 64 };
    let mut mismatches = 0;
    for _ in 0..500 {
        let n = rng.gen_range(1..=64);
        let mut v = || f64::from(rng.gen_range(0u8..8)) / 4.0;
        let pool: Vec<ScoreTriple<f64>> = (0..n).map(|_| ScoreTriple { f_s: v(), f_f: v(), f_b: v() }).collect();
        let expected = passing_by_enumeration(&pool);
        let same = match select_indices(&pool, &strategy) {
            Ok(got) => got.into_iter().collect::<BTreeSet<_>>() == expected,
            Err(SelectionError::EmptySelection) => expected.is_empty(),
            Err(_) => false,
        };
        if !same {
            mismatches += 1;
        }
    }
    ledger.record(
        "balanced selection equivalence",
        mismatches == 0,
        format!("500 pools of up to 64, {mismatches} mismatches"),
    );
}

fn iterate(seed: u64, instances: usize, config: IterationConfig, dir: &Path) -> IterationState {
    let mock = simulated_mock(seed, Some(&dir.join("registry.json"))).unwrap();
    let budget = BackendBudget {
        retry_backoff: vec![Duration::ZERO],
        ..BackendBudget::default()
    };
    let client = Client::new(Arc::new(mock), budget).unwrap();
    let scoring = ScoringContext::<f64>::new("scorer");
    let paths = RunPaths::new(dir);
    let runner = Runner {
        client: &client,
        scoring: &scoring,
        config: &config,
        paths: &paths,
    };
    let mut state = initial_state(&paths, "m0", false).unwrap();
    runner.run_loop(&synthesize(seed, instances, &SyntheticConfig::default()), &mut state).unwrap();
    state
}

fn means(state: &IterationState, f: fn(&ScoreTriple<f64>) -> f64) -> Vec<f64> {
    state.score_stats.iter().map(|s| f(&s.mean)).collect()
}

fn single_objective_trend(ledger: &mut Ledger) {
    let run = |objective: &str, seed: u64| {
        let dir = tempfile::tempdir().unwrap();
        let config = IterationConfig {
            iterations: 3,
            strategy: objective.parse::<SelectionStrategy>().unwrap().with_quota(30),
            ..IterationConfig::default()
        };
        iterate(seed, 30, config, dir.path())
    };
    let mut rising = 0;
    let mut falling = 0;
    for seed in 0..20 {
        let s = means(&run("single:f_s", seed), |t| t.f_s);
        rising += usize::from(s.windows(2).all(|w| w[1] > w[0]));
        let b = means(&run("single:f_b", seed), |t| t.f_b);
        falling += usize::from(b.windows(2).all(|w| w[1] < w[0]));
    }
    ledger.record(
        "single-objective trend",
        rising >= 19 && falling >= 19,
        format!("f_S strictly rising in {rising}/20 seeds, f_B strictly falling in {falling}/20"),
    );
}

fn balanced_trend(ledger: &mut Ledger) {
    let mut good = 0;
    let mut quota_held = true;
    for seed in 0..10 {
        let dir = tempfile::tempdir().unwrap();
        let config = IterationConfig {
            iterations: 5,
            strategy: SelectionStrategy::BalancedTopFraction { fraction: 0.5, quota: 50 },
            ..IterationConfig::default()
        };
        let state = iterate(100 + seed, 30, config.clone(), dir.path());
        let s = means(&state, |t| t.f_s);
        let f = means(&state, |t| t.f_f);
        let monotone = s.len() == 5 && s.windows(2).all(|w| w[1] >= w[0]) && f.windows(2).all(|w| w[1] >= w[0]);
        good += usize::from(monotone);
        quota_held &= state.score_stats.iter().all(|st| st.selected <= 50);
    }
    ledger.record(
        "balanced expert-iteration trend",
        good == 10 && quota_held,
        format!("f_S and f_F non-decreasing over 5 iterations in {good}/10 seeds, quota 50 respected: {quota_held}"),
    );
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn end_to_end_run(dir: &Path) -> Duration {
    let start = Instant::now();
    let config = IterationConfig {
        iterations: 2,
        ..IterationConfig::default()
    };
    let generation = config.generation.clone();
    let state = iterate(9, 10, config, dir);
    let corpus: BTreeMap<String, ExplanationInstance> = synthesize(9, 10, &SyntheticConfig::default())
        .into_iter()
        .map(|i| (i.instance_id().to_string(), i))
        .collect();
    let paths = RunPaths::new(dir);
    export_finetune_dataset(&state.accumulated, &corpus, ExportStyle::Distillation, &generation, &paths.distillation())
        .unwrap();
    let records: Vec<EvalRecord> = state
        .accumulated
        .iter()
        .map(|c| EvalRecord {
            instance_id: c.instance_id.clone(),
            method: format!("iteration-{}", c.provenance.iteration),
            explanation: c.explanation.clone(),
        })
        .collect();
    let client = simulated_mock(9, None).unwrap().into_client();
    let report = evaluate(&client, &records, &corpus, &ScoringContext::<f64>::new("scorer")).unwrap();
    emit_report(&report, &dir.join("report")).unwrap();
    start.elapsed()
}

fn end_to_end(ledger: &mut Ledger) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let elapsed = end_to_end_run(a.path());
    end_to_end_run(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let expected = ["state.json", "scores.jsonl", "distill.jsonl", "report/metrics.json", "report/metrics.txt"];
    let complete = expected.iter().all(|f| ta.contains_key(Path::new(f)))
        && ta.keys().any(|k| k.starts_with("finetune"));
    ledger.record(
        "end-to-end smoke",
        complete && ta == tb && elapsed < Duration::from_secs(60),
        format!(
            "{} files, identical across runs: {}, {:.2}s",
            ta.len(),
            ta == tb,
            elapsed.as_secs_f64()
        ),
    );
}

/// Each label's first word draws a pseudo-random log-probability from the
/// whole context; later words are free, so label length carries no weight.
fn uniform_label_scorer(model: &str, context: &str, word: &str) -> f64 {
    let first_words: Vec<&str> = LABELS.iter().map(|l| l.split(' ').next().unwrap()).collect();
    if !context.ends_with("### Category\n") || !first_words.contains(&word) {
        return 0.0;
    }
    let mut h = DefaultHasher::new();
    (model, context, word).hash(&mut h);
    -((h.finish() % 1_000_000) as f64) / 1000.0 - 0.001
}

fn simulatability_calibration(ledger: &mut Ledger) {
    let corpus: BTreeMap<String, ExplanationInstance> = synthesize(6, 700, &SyntheticConfig::default())
        .into_iter()
        .map(|i| (i.instance_id().to_string(), i))
        .collect();
    let records: Vec<EvalRecord> = corpus
        .values()
        .map(|i| EvalRecord {
            instance_id: i.instance_id().to_string(),
            method: "m".into(),
            explanation: format!("{} because of {}", i.prediction().label(), i.instance_id()),
        })
        .collect();
    let ctx = ScoringContext::<f64>::new("scorer");
    let oracle = MockBackend::new(0).with_scorer(OverlapModel::new(1.0, 0.1)).into_client();
    let perfect = simulatability(&oracle, &records, &corpus, &ctx).unwrap();

    let uniform = MockBackend::new(0).with_scorer(uniform_label_scorer).into_client();
    let chance = simulatability(&uniform, &records, &corpus, &ctx).unwrap();
    let p: f64 = 1.0 / 7.0;
    let sigma = (p * (1.0 - p) / 700.0).sqrt();
    ledger.record(
        "simulatability calibration",
        perfect == 1.0 && (chance - p).abs() <= 3.0 * sigma,
        format!("oracle {perfect}; uniform {chance:.4} vs {p:.4} +/- {:.4}", 3.0 * sigma),
    );
}

#[test]
fn acceptance() {
    let mut ledger = Ledger { failed: Vec::new() };
    verbalization_round_trip(&mut ledger);
    masking_oracle(&mut ledger);
    log_prob_additivity(&mut ledger);
    input_faithfulness_quadrature(&mut ledger);
    prediction_faithfulness(&mut ledger);
    selection_equivalence(&mut ledger);
    single_objective_trend(&mut ledger);
    balanced_trend(&mut ledger);
    end_to_end(&mut ledger);
    simulatability_calibration(&mut ledger);
    assert!(ledger.failed.is_empty(), "failed: {:?}", ledger.failed);
}
