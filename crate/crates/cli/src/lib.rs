//! The `narrator` command line: verbalize instances, score explanations, run
//! expert iteration, evaluate explanation sets and export distillation data.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use narrator_core::backend::http::{HttpBackend, HttpConfig};
use narrator_core::backend::{AuditLog, Client, LanguageModel};
use narrator_core::evaluation::{emit_report, evaluate, read_records};
use narrator_core::iteration::{export_finetune_dataset, initial_state, ExportStyle, RunPaths, Runner};
use narrator_core::measures::score_all;
use narrator_core::synthetic::{simulated_mock, synthesize, SyntheticConfig};
use narrator_core::tag::load_corpus;
use narrator_core::verbalizer::{build_bfs_tree, prune, render_paragraph};
use narrator_core::{EvalRecord, ExplanationInstance, IterationState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BackendKind, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "narrator", version, about = "Natural-language explanations for graph node classifiers")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Mock backend and synthetic corpus seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Continue from the checkpoint or partial output of an earlier run.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Validate the configuration and print the plan without calling a backend.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Override any configuration key, e.g. `--set iteration.quota=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render instance files as saliency paragraphs.
    Verbalize {
        files: Vec<PathBuf>,
        /// Leave out the score annotations.
        #[arg(long)]
        plain: bool,
    },
    /// Score explanation records against the corpus.
    Score {
        /// Newline-delimited `{instance_id, method, explanation}` records.
        #[arg(long)]
        explanations: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run expert iteration on the corpus.
    Iterate,
    /// Compute the metric report for a records file.
    Evaluate {
        #[arg(long)]
        records: PathBuf,
    },
    /// Write every accumulated selection as distillation training data.
    ExportDistill {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic corpus into the corpus directory.
    Synth {
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Verbalize { .. } => "verbalize",
            Self::Score { .. } => "score",
            Self::Iterate => "iterate",
            Self::Evaluate { .. } => "evaluate",
            Self::ExportDistill { .. } => "export-distill",
            Self::Synth { .. } => "synth",
        }
    }

    fn needs_corpus(&self) -> bool {
        !matches!(self, Self::Verbalize { .. } | Self::Synth { .. })
    }
}

/// How a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation or configuration; exit code 2.
    Usage(anyhow::Error),
    /// The command ran and failed; exit code 1.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(e) | Self::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

/// Configuration after file, `--set` overrides and dedicated flags, in that
/// order of precedence (last wins).
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(kind) = cli.backend {
        let name = match kind {
            BackendKind::Mock => "mock",
            BackendKind::Http => "http",
        };
        overrides.push(format!("backend.kind=\"{name}\""));
    }
    if let Some(seed) = cli.seed {
        overrides.push(format!("backend.seed={seed}"));
    }
    let quoted = |p: &Path| toml::Value::String(p.display().to_string()).to_string();
    if let Some(c) = &cli.corpus {
        overrides.push(format!("paths.corpus={}", quoted(c)));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("paths.output={}", quoted(o)));
    }
    RunConfig::resolve(cli.config.as_deref(), &overrides)
}

pub fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let cfg = resolve_config(&cli).map_err(usage)?;
    cfg.validate(cli.command.needs_corpus()).map_err(usage)?;
    if let Command::Score { explanations, .. } = &cli.command {
        if !explanations.is_file() {
            return Err(usage(anyhow!("explanation file {} does not exist", explanations.display())));
        }
    }
    if let Command::Evaluate { records } = &cli.command {
        if !records.is_file() {
            return Err(usage(anyhow!("records file {} does not exist", records.display())));
        }
    }
    if cli.dry_run {
        print!("{}", plan(&cli, &cfg).map_err(usage)?);
        return Ok(());
    }
    let name = cli.command.name();
    match &cli.command {
        Command::Verbalize { files, plain } => return cmd_verbalize(&cfg, files, !plain),
        Command::Synth { count } => cmd_synth(&cfg, *count),
        Command::Score { explanations, output } => cmd_score(&cfg, explanations, output.as_deref(), cli.resume),
        Command::Iterate => cmd_iterate(&cfg, cli.resume),
        Command::Evaluate { records } => cmd_evaluate(&cfg, records, cli.resume),
        Command::ExportDistill { output } => cmd_export_distill(&cfg, output.as_deref()),
    }
    .and_then(|()| write_resolved(&cfg, name))
    .map_err(runtime)
}

fn write_resolved(cfg: &RunConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&cfg.paths.output)?;
    let path = cfg.paths.output.join(format!("run-config.{command}.toml"));
    fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}

fn plan(cli: &Cli, cfg: &RunConfig) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "command: {}", cli.command.name())?;
    let backend = match cfg.backend.kind {
        BackendKind::Mock => format!("mock (seed {})", cfg.backend.seed),
        BackendKind::Http => format!(
            "http ({})",
            std::env::var(narrator_core::backend::http::API_BASE_ENV)
                .ok()
                .or_else(|| cfg.backend.base_url.clone())
                .unwrap_or_else(|| "no base URL".into())
        ),
    };
    writeln!(out, "backend: {backend}")?;
    let corpus_size = || -> Result<usize> { Ok(load_corpus(&cfg.paths.corpus)?.len()) };
    match &cli.command {
        Command::Verbalize { files, plain } => {
            writeln!(out, "render {} file(s), scores {}", files.len(), if *plain { "off" } else { "on" })?;
        }
        Command::Synth { count } => {
            writeln!(out, "write {count} synthetic instance(s) to {}", cfg.paths.corpus.display())?;
        }
        Command::Score { explanations, .. } => {
            let n = read_records(explanations)?.len();
            writeln!(out, "score {n} record(s) against {} instance(s)", corpus_size()?)?;
        }
        Command::Iterate => {
            let c = cfg.iteration_config()?;
            writeln!(
                out,
                "{} iteration(s) x {} instance(s) x {} candidate(s), strategy {}",
                c.iterations,
                corpus_size()?,
                c.candidates_per_instance,
                c.strategy
            )?;
            writeln!(out, "checkpoint: {}{}", cfg.state_path().display(), if cli.resume { " (resume)" } else { "" })?;
        }
        Command::Evaluate { records } => {
            writeln!(out, "evaluate {} record(s)", read_records(records)?.len())?;
        }
        Command::ExportDistill { .. } => {
            writeln!(out, "export accumulated selections from {}", cfg.state_path().display())?;
        }
    }
    writeln!(out, "--- resolved configuration ---")?;
    out.push_str(&cfg.to_toml());
    Ok(out)
}

fn client(cfg: &RunConfig, audit: Option<&Path>, append: bool) -> Result<Client> {
    let model: Arc<dyn LanguageModel> = match cfg.backend.kind {
        BackendKind::Mock => {
            let registry = cfg.paths.output.join("registry.json");
            Arc::new(simulated_mock(cfg.backend.seed, Some(&registry))?)
        }
        BackendKind::Http => {
            let mut http = HttpConfig::from_env(cfg.backend.base_url.as_deref())?;
            http.request_timeout = Duration::from_secs(cfg.backend.request_timeout_secs);
            http.poll_interval = Duration::from_secs(cfg.backend.poll_interval_secs);
            Arc::new(HttpBackend::new(http)?)
        }
    };
    let mut client = Client::new(model, cfg.backend.budget())?;
    if let Some(path) = audit {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        if !append {
            fs::write(path, "")?;
        }
        client = client.with_audit(Arc::new(AuditLog::open(path)?));
    }
    Ok(client)
}

fn audit_path(cfg: &RunConfig, command: &str) -> PathBuf {
    cfg.paths.output.join("audit").join(format!("{command}.jsonl"))
}

fn corpus_map(cfg: &RunConfig) -> Result<BTreeMap<String, ExplanationInstance>> {
    Ok(load_corpus(&cfg.paths.corpus)?
        .into_iter()
        .map(|i| (i.instance_id().to_string(), i))
        .collect())
}

fn cmd_verbalize(cfg: &RunConfig, files: &[PathBuf], with_scores: bool) -> std::result::Result<(), Failure> {
    if files.is_empty() {
        return Ok(());
    }
    let dir = cfg.paths.output.join("paragraphs");
    fs::create_dir_all(&dir).map_err(runtime)?;
    let mut failures = Vec::new();
    for file in files {
        let rendered = ExplanationInstance::load(file).map_err(anyhow::Error::from).and_then(|inst| {
            let mut tree = build_bfs_tree(&inst, cfg.verbalizer.hop_k);
            if let Some(t) = cfg.verbalizer.prune_threshold {
                tree = prune(&tree, &inst, t);
            }
            let text = render_paragraph(&tree, &inst, with_scores).text + "\n";
            let path = dir.join(format!("{}.txt", inst.instance_id()));
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
        });
        if let Err(e) = rendered {
            failures.push(format!("  {}: {e:#}", file.display()));
        }
    }
    write_resolved(cfg, "verbalize").map_err(runtime)?;
    if failures.is_empty() {
        return Ok(());
    }
    Err(runtime(anyhow!(
        "{} of {} file(s) failed:\n{}",
        failures.len(),
        files.len(),
        failures.join("\n")
    )))
}

fn cmd_synth(cfg: &RunConfig, count: usize) -> Result<()> {
    fs::create_dir_all(&cfg.paths.corpus)?;
    for inst in synthesize(cfg.backend.seed, count, &SyntheticConfig::default()) {
        inst.save(cfg.paths.corpus.join(format!("{}.json", inst.instance_id())))?;
    }
    Ok(())
}

/// One line of `score` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreLine {
    pub instance_id: String,
    pub method: String,
    pub f_s: f64,
    pub f_f: f64,
    pub f_b: f64,
}

/// Lines of an earlier partial run that still match the records, in order.
fn completed_prefix(path: &Path, records: &[EvalRecord]) -> usize {
    let Ok(text) = fs::read_to_string(path) else {
        return 0;
    };
    // A line without its newline was cut off mid-write.
    let complete = text.rfind('\n').map_or("", |i| &text[..=i]);
    complete
        .lines()
        .zip(records)
        .take_while(|(line, r)| {
            serde_json::from_str::<ScoreLine>(line)
                .is_ok_and(|s| s.instance_id == r.instance_id && s.method == r.method)
        })
        .count()
}

fn cmd_score(cfg: &RunConfig, explanations: &Path, output: Option<&Path>, resume: bool) -> Result<()> {
    let records = read_records(explanations)?;
    let corpus = corpus_map(cfg)?;
    if let Some(r) = records.iter().find(|r| !corpus.contains_key(&r.instance_id)) {
        bail!("record refers to unknown instance {:?}", r.instance_id);
    }
    let output = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.output.join("explanation-scores.jsonl"));
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let done = if resume { completed_prefix(&output, &records) } else { 0 };
    // Rewrite the kept prefix so a torn last line disappears.
    let kept: String = fs::read_to_string(&output)
        .unwrap_or_default()
        .lines()
        .take(done)
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&output, kept)?;
    if done > 0 {
        log::info!("resuming after {done} scored record(s)");
    }

    let client = client(cfg, Some(&audit_path(cfg, "score")), resume)?;
    let ctx = cfg.scoring()?;
    let mut file = fs::OpenOptions::new().append(true).open(&output)?;
    let chunk = (rayon::current_num_threads() * 2).max(1);
    for batch in records[done..].chunks(chunk) {
        let lines: Vec<ScoreLine> = batch
            .par_iter()
            .map(|r| {
                let t = score_all(&client, &corpus[&r.instance_id], &r.explanation, &ctx)
                    .with_context(|| format!("scoring {} ({})", r.instance_id, r.method))?;
                Ok(ScoreLine {
                    instance_id: r.instance_id.clone(),
                    method: r.method.clone(),
                    f_s: t.f_s,
                    f_f: t.f_f,
                    f_b: t.f_b,
                })
            })
            .collect::<Result<_>>()?;
        let mut text = String::new();
        for l in &lines {
            text.push_str(&serde_json::to_string(l)?);
            text.push('\n');
        }
        file.write_all(text.as_bytes())?;
        file.flush()?;
    }
    Ok(())
}

/// Method name of selections made in `iteration`.
pub fn iteration_method(iteration: usize) -> String {
    format!("iteration-{iteration}")
}

fn cmd_iterate(cfg: &RunConfig, resume: bool) -> Result<()> {
    let dataset = load_corpus(&cfg.paths.corpus)?;
    if dataset.is_empty() {
        bail!("corpus {} holds no instances", cfg.paths.corpus.display());
    }
    fs::create_dir_all(&cfg.paths.output)?;
    let paths = RunPaths::new(&cfg.paths.output).with_state(cfg.state_path());
    if !resume {
        // Profiles learned by an earlier mock run would leak into this one.
        let registry = cfg.paths.output.join("registry.json");
        if registry.exists() {
            fs::remove_file(&registry)?;
        }
    }
    let client = client(cfg, Some(&audit_path(cfg, "iterate")), resume)?;
    let scoring = cfg.scoring()?;
    let config = cfg.iteration_config()?;
    let runner = Runner {
        client: &client,
        scoring: &scoring,
        config: &config,
        paths: &paths,
    };
    let mut state = initial_state(&paths, &cfg.backend.generator_model, resume)?;
    runner.run_loop(&dataset, &mut state)?;

    let mut text = String::new();
    for c in &state.accumulated {
        let r = EvalRecord {
            instance_id: c.instance_id.clone(),
            method: iteration_method(c.provenance.iteration),
            explanation: c.explanation.clone(),
        };
        text.push_str(&serde_json::to_string(&r)?);
        text.push('\n');
    }
    fs::write(cfg.paths.output.join("selected.jsonl"), text)?;
    for s in &state.score_stats {
        println!(
            "iteration {}: {} selected of {}, mean f_s {:.4} f_f {:.4} f_b {:.4}",
            s.iteration, s.selected, s.candidates, s.mean.f_s, s.mean.f_f, s.mean.f_b
        );
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, records: &Path, resume: bool) -> Result<()> {
    let records = read_records(records)?;
    let corpus = corpus_map(cfg)?;
    let client = client(cfg, Some(&audit_path(cfg, "evaluate")), resume)?;
    let report = evaluate(&client, &records, &corpus, &cfg.scoring()?)?;
    let (_, table) = emit_report(&report, &cfg.paths.output)?;
    print!("{}", fs::read_to_string(table)?);
    Ok(())
}

fn cmd_export_distill(cfg: &RunConfig, output: Option<&Path>) -> Result<()> {
    let state_path = cfg.state_path();
    if !state_path.exists() {
        bail!("no iteration checkpoint at {}", state_path.display());
    }
    let state = IterationState::<f64>::load(&state_path)?;
    let corpus = corpus_map(cfg)?;
    let path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| RunPaths::new(&cfg.paths.output).distillation());
    export_finetune_dataset(&state.accumulated, &corpus, ExportStyle::Distillation, &cfg.generation(), &path)?;
    println!("{} record(s) written to {}", state.accumulated.len(), path.display());
    Ok(())
}
