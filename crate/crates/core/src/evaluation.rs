//! Corpus-level metrics over sets of explanations: PMI at fixed rationale
//! sizes, simulatability and brevity, aggregated per producing method.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Client, LogProbQuery};
use crate::measures::{
    classification_prompt, label_words, pmi_at_tau, score_brevity, MeasureError, ScoringContext,
};
use crate::prompts::scoring_templates_hash;
use crate::scalar::{mean, std_dev, Scalar};
use crate::tag::ExplanationInstance;

/// Rationale sizes reported, in percent of the ego graph's tokens.
pub const PMI_PERCENTS: [u32; 3] = [10, 20, 30];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("record refers to unknown instance {0:?}")]
    UnknownInstance(String),
    #[error("no records to evaluate")]
    EmptyRecords,
    #[error("k must be one of 10, 20, 30, got {0}")]
    InvalidPercent(u32),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub instance_id: String,
    pub method: String,
    pub explanation: String,
}

/// Newline-delimited records; blank lines are skipped.
pub fn parse_records(text: &str, path: &Path) -> Result<Vec<EvalRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_records(&text, path)
}

/// Single-τ PMI with `τ = k_percent / 100`.
pub fn pmi_at_k<S: Scalar>(
    client: &Client,
    instance: &ExplanationInstance,
    explanation: &str,
    k_percent: u32,
    ctx: &ScoringContext<S>,
) -> Result<S> {
    if !PMI_PERCENTS.contains(&k_percent) {
        return Err(EvalError::InvalidPercent(k_percent));
    }
    let tau = S::from_count(k_percent as usize) / S::from_count(100);
    Ok(pmi_at_tau(client, instance, explanation, tau, ctx)?)
}

/// The label the scoring model infers from the explanation alone: the argmax
/// of `ln P(label | classification prompt with E)`, first label on ties.
pub fn simulated_label<S: Scalar>(
    client: &Client,
    instance: &ExplanationInstance,
    explanation: &str,
    ctx: &ScoringContext<S>,
) -> Result<String> {
    let prompt = classification_prompt(Some(explanation));
    let mut best: Option<(f64, &String)> = None;
    for label in instance.prediction().label_set() {
        let query = LogProbQuery::new(prompt.clone(), label_words(label), ctx.scoring_model.clone());
        let lp = client.log_prob(&query).map_err(MeasureError::from)?;
        if best.is_none_or(|(b, _)| lp > b) {
            best = Some((lp, label));
        }
    }
    Ok(best.expect("label set is non-empty").1.clone())
}

fn resolve<'a>(
    corpus: &'a BTreeMap<String, ExplanationInstance>,
    record: &EvalRecord,
) -> Result<&'a ExplanationInstance> {
    corpus
        .get(&record.instance_id)
        .ok_or_else(|| EvalError::UnknownInstance(record.instance_id.clone()))
}

/// Fraction of records whose simulated label equals the prediction.
pub fn simulatability<S: Scalar>(
    client: &Client,
    records: &[EvalRecord],
    corpus: &BTreeMap<String, ExplanationInstance>,
    ctx: &ScoringContext<S>,
) -> Result<S> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let hits: Vec<bool> = records
        .par_iter()
        .map(|r| {
            let inst = resolve(corpus, r)?;
            Ok(simulated_label(client, inst, &r.explanation, ctx)? == inst.prediction().label())
        })
        .collect::<Result<_>>()?;
    Ok(S::from_count(hits.iter().filter(|&&h| h).count()) / S::from_count(hits.len()))
}

pub fn brevity_corpus<S: Scalar>(
    records: &[EvalRecord],
    corpus: &BTreeMap<String, ExplanationInstance>,
    ctx: &ScoringContext<S>,
) -> Result<S> {
    let values = records
        .iter()
        .map(|r| Ok(score_brevity(resolve(corpus, r)?, &r.explanation, ctx)?))
        .collect::<Result<Vec<S>>>()?;
    mean(&values).ok_or(EvalError::EmptyRecords)
}

/// One value per metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct MetricValues<S = f64> {
    pub pmi_10: S,
    pub pmi_20: S,
    pub pmi_30: S,
    pub simulatability: S,
    pub brevity: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct InstanceMetrics<S = f64> {
    pub instance_id: String,
    pub pmi_10: S,
    pub pmi_20: S,
    pub pmi_30: S,
    pub simulated_label: String,
    pub correct: bool,
    pub brevity: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct MethodReport<S = f64> {
    pub count: usize,
    pub means: MetricValues<S>,
    /// Standard error of each mean.
    pub std_err: MetricValues<S>,
    pub per_instance: Vec<InstanceMetrics<S>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", deny_unknown_fields)]
pub struct MetricReport<S = f64> {
    pub scoring_model: String,
    pub scoring_templates: String,
    pub records: usize,
    pub methods: BTreeMap<String, MethodReport<S>>,
}

fn instance_metrics<S: Scalar>(
    client: &Client,
    record: &EvalRecord,
    instance: &ExplanationInstance,
    ctx: &ScoringContext<S>,
) -> Result<InstanceMetrics<S>> {
    let pmi = |k| pmi_at_k(client, instance, &record.explanation, k, ctx);
    let simulated = simulated_label(client, instance, &record.explanation, ctx)?;
    Ok(InstanceMetrics {
        instance_id: record.instance_id.clone(),
        pmi_10: pmi(10)?,
        pmi_20: pmi(20)?,
        pmi_30: pmi(30)?,
        correct: simulated == instance.prediction().label(),
        simulated_label: simulated,
        brevity: score_brevity(instance, &record.explanation, ctx)?,
    })
}

fn summarize<S: Scalar>(rows: Vec<InstanceMetrics<S>>) -> MethodReport<S> {
    let n = rows.len();
    let stat = |f: &dyn Fn(&InstanceMetrics<S>) -> S| -> (S, S) {
        let values: Vec<S> = rows.iter().map(f).collect();
        let m = mean(&values).unwrap_or_else(S::zero);
        (m, std_dev(&values) / S::from_count(n).sqrt())
    };
    let (p10, e10) = stat(&|r| r.pmi_10);
    let (p20, e20) = stat(&|r| r.pmi_20);
    let (p30, e30) = stat(&|r| r.pmi_30);
    let (sim, esim) = stat(&|r| if r.correct { S::one() } else { S::zero() });
    let (bre, ebre) = stat(&|r| r.brevity);
    MethodReport {
        count: n,
        means: MetricValues {
            pmi_10: p10,
            pmi_20: p20,
            pmi_30: p30,
            simulatability: sim,
            brevity: bre,
        },
        std_err: MetricValues {
            pmi_10: e10,
            pmi_20: e20,
            pmi_30: e30,
            simulatability: esim,
            brevity: ebre,
        },
        per_instance: rows,
    }
}

/// Every metric for every record, grouped by method. Records keep their file
/// order within a method.
pub fn evaluate<S: Scalar>(
    client: &Client,
    records: &[EvalRecord],
    corpus: &BTreeMap<String, ExplanationInstance>,
    ctx: &ScoringContext<S>,
) -> Result<MetricReport<S>> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    for r in records {
        resolve(corpus, r)?;
    }
    let rows: Vec<InstanceMetrics<S>> = records
        .par_iter()
        .map(|r| instance_metrics(client, r, resolve(corpus, r)?, ctx))
        .collect::<Result<_>>()?;
    let mut grouped: BTreeMap<String, Vec<InstanceMetrics<S>>> = BTreeMap::new();
    for (r, row) in records.iter().zip(rows) {
        grouped.entry(r.method.clone()).or_default().push(row);
    }
    Ok(MetricReport {
        scoring_model: ctx.scoring_model.clone(),
        scoring_templates: scoring_templates_hash(),
        records: records.len(),
        methods: grouped.into_iter().map(|(m, rows)| (m, summarize(rows))).collect(),
    })
}

impl<S: Scalar> MetricReport<S> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Methods × metrics, arrows marking the better direction.
    pub fn to_table(&self) -> String {
        let headers = ["Method", "Simul. (↑)", "PMI-10% (↑)", "PMI-20% (↑)", "PMI-30% (↑)", "Brevity (↓)", "N"];
        let mut rows: Vec<Vec<String>> = vec![headers.iter().map(|h| h.to_string()).collect()];
        for (method, r) in &self.methods {
            let m = &r.means;
            rows.push(vec![
                method.clone(),
                format!("{:.4}", m.simulatability.to_f64_lossy()),
                format!("{:.4}", m.pmi_10.to_f64_lossy()),
                format!("{:.4}", m.pmi_20.to_f64_lossy()),
                format!("{:.4}", m.pmi_30.to_f64_lossy()),
                format!("{:.4}", m.brevity.to_f64_lossy()),
                r.count.to_string(),
            ]);
        }
        let widths: Vec<usize> = (0..headers.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| {
                    let pad = w - cell.chars().count();
                    if c == 0 {
                        format!("{cell}{}", " ".repeat(pad))
                    } else {
                        format!("{}{cell}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

/// Writes `metrics.json` and `metrics.txt` into `dir`.
pub fn emit_report<S: Scalar>(report: &MetricReport<S>, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let io = |p: &Path, e: std::io::Error| EvalError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let json = dir.join("metrics.json");
    let table = dir.join("metrics.txt");
    fs::write(&json, report.to_json()).map_err(|e| io(&json, e))?;
    fs::write(&table, report.to_table()).map_err(|e| io(&table, e))?;
    Ok((json, table))
}
