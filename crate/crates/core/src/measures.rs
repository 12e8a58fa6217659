//! Explanation quality measures.
//!
//! * input faithfulness `f_S`: pointwise mutual information between the
//!   explanation and the top-τ salient tokens, estimated as the gain in
//!   masked-token log-likelihood when the explanation is added to the masked
//!   document, averaged over a τ quadrature grid;
//! * prediction faithfulness `f_F`: gain in the log-likelihood of the predicted
//!   label when the (label-masked) explanation is shown;
//! * brevity `f_B`: explanation length over graph serialization length, in
//!   whitespace tokens.
//!
//! Everything is generic over the [`Scalar`] the scores are accumulated in.

use std::collections::HashMap;
use std::sync::{LazyLock, Mutex};

use rayon::prelude::*;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Client, LogProbQuery};
use crate::prompts::{CLASSIFY, MASK_FILL};
use crate::scalar::Scalar;
use crate::tag::ExplanationInstance;
use crate::verbalizer::{
    build_masked_instance_with, serialize_plain, word_count, VerbalizerError, DEFAULT_HOP_K,
    MASK_PLACEHOLDER,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Verbalizer(#[from] VerbalizerError),
    #[error("assembled prompt has {words} words, budget is {budget}")]
    InstanceTooLarge { words: usize, budget: usize },
    #[error("graph serialization has zero length")]
    DivisionDomain,
    #[error("explanation is empty")]
    EmptyExplanation,
    #[error("invalid tau distribution: {0}")]
    InvalidTau(String),
    #[error("label {label:?} cannot be masked with placeholder {placeholder:?}")]
    LabelCollision { label: String, placeholder: String },
}

pub type Result<T> = std::result::Result<T, MeasureError>;

/// Finite quadrature of the τ distribution: a strictly increasing grid in
/// `(0, 1]` with non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct TauDistribution<S = f64> {
    grid: Vec<S>,
    weights: Vec<S>,
}

pub const DEFAULT_TAU_GRID: [f64; 6] = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30];

impl<S: Scalar> TauDistribution<S> {
    pub fn new(grid: Vec<S>, weights: Vec<S>) -> Result<Self> {
        let bad = |m: String| Err(MeasureError::InvalidTau(m));
        if grid.is_empty() || grid.len() != weights.len() {
            return bad(format!(
                "grid has {} points and {} weights",
                grid.len(),
                weights.len()
            ));
        }
        if grid.iter().any(|&t| !(t > S::zero() && t <= S::one())) {
            return bad("grid points must lie in (0, 1]".into());
        }
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("grid must be strictly increasing".into());
        }
        if weights.iter().any(|&w| !(w >= S::zero()) || !w.is_finite()) {
            return bad("weights must be finite and non-negative".into());
        }
        let total = weights.iter().fold(S::zero(), |a, &w| a + w);
        let tol = S::from_f64_lossy(1e-6);
        if (total - S::one()).abs() > tol {
            return bad(format!("weights sum to {total}, not 1"));
        }
        Ok(Self { grid, weights })
    }

    pub fn uniform(grid: Vec<S>) -> Result<Self> {
        let n = S::from_count(grid.len());
        let weights = vec![S::one() / n; grid.len()];
        Self::new(grid, weights)
    }

    pub fn point_mass(tau: S) -> Result<Self> {
        Self::new(vec![tau], vec![S::one()])
    }

    pub fn grid(&self) -> &[S] {
        &self.grid
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }
}

impl<S: Scalar> Default for TauDistribution<S> {
    /// Uniform over `0.05, 0.10, ..., 0.30`.
    fn default() -> Self {
        Self::uniform(DEFAULT_TAU_GRID.iter().map(|&t| S::from_f64_lossy(t)).collect())
            .expect("default grid is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ScoreTriple<S = f64> {
    pub f_s: S,
    pub f_f: S,
    pub f_b: S,
}

impl<S: Scalar> ScoreTriple<S> {
    pub fn get(&self, objective: Objective) -> S {
        match objective {
            Objective::FS => self.f_s,
            Objective::FF => self.f_f,
            Objective::FB => self.f_b,
        }
    }
}

/// One of the three measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "f_s")]
    FS,
    #[serde(rename = "f_f")]
    FF,
    #[serde(rename = "f_b")]
    FB,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::FS, Objective::FF, Objective::FB];

    /// Brevity is the only measure where lower is better.
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Objective::FB)
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::FS => "f_s",
            Objective::FF => "f_f",
            Objective::FB => "f_b",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "f_s" | "fs" => Ok(Self::FS),
            "f_f" | "ff" => Ok(Self::FF),
            "f_b" | "fb" => Ok(Self::FB),
            other => Err(format!("unknown objective {other:?}; expected f_s, f_f or f_b")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringContext<S = f64> {
    pub scoring_model: String,
    pub tau_dist: TauDistribution<S>,
    pub hop_k: usize,
    pub mask_placeholder: String,
    /// Largest prompt, in whitespace words, sent to the scoring model.
    pub max_prompt_words: Option<usize>,
    /// Evaluate τ points and the two faithfulness terms concurrently.
    pub parallel: bool,
}

impl<S: Scalar> ScoringContext<S> {
    pub fn new(scoring_model: impl Into<String>) -> Self {
        Self {
            scoring_model: scoring_model.into(),
            tau_dist: TauDistribution::default(),
            hop_k: DEFAULT_HOP_K,
            mask_placeholder: MASK_PLACEHOLDER.to_string(),
            max_prompt_words: None,
            parallel: true,
        }
    }

    pub fn with_tau(mut self, tau_dist: TauDistribution<S>) -> Self {
        self.tau_dist = tau_dist;
        self
    }

    pub fn with_hop_k(mut self, hop_k: usize) -> Self {
        self.hop_k = hop_k.max(1);
        self
    }

    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }

    fn check_budget(&self, prompt: &str) -> Result<()> {
        if let Some(budget) = self.max_prompt_words {
            let words = word_count(prompt);
            if words > budget {
                return Err(MeasureError::InstanceTooLarge { words, budget });
            }
        }
        Ok(())
    }

    fn log_prob(&self, client: &Client, context: String, continuation: Vec<String>) -> Result<S> {
        self.check_budget(&context)?;
        let query = LogProbQuery::new(context, continuation, self.scoring_model.clone());
        Ok(S::from_f64_lossy(client.log_prob(&query)?))
    }
}

fn explanation_section(explanation: Option<&str>) -> String {
    match explanation {
        Some(e) => format!("\n### Explanation\n{e}\n"),
        None => String::new(),
    }
}

/// Mask-filling prompt for a masked document, optionally conditioned on an
/// explanation.
pub fn mask_fill_prompt(masked_document: &str, placeholder: &str, explanation: Option<&str>) -> String {
    MASK_FILL.render(&[
        ("mask", placeholder),
        ("document", masked_document),
        ("explanation_section", &explanation_section(explanation)),
    ])
}

/// Classification prompt, optionally showing an explanation.
pub fn classification_prompt(explanation: Option<&str>) -> String {
    CLASSIFY.render(&[("explanation_section", &explanation_section(explanation))])
}

/// Label text split into scoring words.
pub fn label_words(label: &str) -> Vec<String> {
    label.split_whitespace().map(str::to_string).collect()
}

/// Single-τ input faithfulness: `ln P(R | G_M, E) - ln P(R | G_M)`.
pub fn pmi_at_tau<S: Scalar>(
    client: &Client,
    instance: &ExplanationInstance,
    explanation: &str,
    tau: S,
    ctx: &ScoringContext<S>,
) -> Result<S> {
    if explanation.trim().is_empty() {
        return Err(MeasureError::EmptyExplanation);
    }
    let masked = build_masked_instance_with(instance, ctx.hop_k, tau.to_f64_decimal(), &ctx.mask_placeholder)?;
    let rationale = masked.rationale_words();
    if rationale.is_empty() {
        return Ok(S::zero());
    }
    let with_e = mask_fill_prompt(&masked.masked_document, &ctx.mask_placeholder, Some(explanation));
    let without_e = mask_fill_prompt(&masked.masked_document, &ctx.mask_placeholder, None);
    let conditioned = ctx.log_prob(client, with_e, rationale.clone())?;
    let marginal = ctx.log_prob(client, without_e, rationale)?;
    Ok(conditioned - marginal)
}

/// `f_S`: τ-weighted sum of [`pmi_at_tau`] over the context's grid.
pub fn score_input_faithfulness<S: Scalar>(
    client: &Client,
    instance: &ExplanationInstance,
    explanation: &str,
    ctx: &ScoringContext<S>,
) -> Result<S> {
    let grid = ctx.tau_dist.grid();
    let per_tau: Vec<S> = if ctx.parallel {
        grid.par_iter()
            .map(|&tau| pmi_at_tau(client, instance, explanation, tau, ctx))
            .collect::<Result<_>>()?
    } else {
        grid.iter()
            .map(|&tau| pmi_at_tau(client, instance, explanation, tau, ctx))
            .collect::<Result<_>>()?
    };
    Ok(per_tau
        .iter()
        .zip(ctx.tau_dist.weights())
        .fold(S::zero(), |acc, (&p, &w)| acc + w * p))
}

fn label_pattern(labels: &[String], placeholder: &str) -> Result<Regex> {
    let folded = placeholder.to_lowercase();
    if let Some(l) = labels.iter().find(|l| folded.contains(&l.to_lowercase())) {
        return Err(MeasureError::LabelCollision {
            label: l.clone(),
            placeholder: placeholder.to_string(),
        });
    }
    let mut sorted: Vec<&String> = labels.iter().filter(|l| !l.is_empty()).collect();
    // Longest first, so "Rule Learning" wins over "Learning" at the same spot.
    sorted.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    let alternation = sorted
        .iter()
        .map(|l| regex::escape(l))
        .collect::<Vec<_>>()
        .join("|");
    let mut cache = LABEL_PATTERNS.lock().unwrap();
    let pattern = cache.entry(alternation).or_insert_with_key(|alternation| {
        RegexBuilder::new(alternation)
            .case_insensitive(true)
            .build()
            .expect("escaped alternation compiles")
    });
    Ok(pattern.clone())
}

/// Compiled label alternations; a corpus has only a handful of label sets.
static LABEL_PATTERNS: LazyLock<Mutex<HashMap<String, Regex>>> = LazyLock::new(Default::default);

/// Replaces every case-insensitive occurrence of any label with the
/// placeholder, repeating until none is left.
pub fn mask_labels(text: &str, labels: &[String], placeholder: &str) -> Result<String> {
    if labels.iter().all(|l| l.is_empty()) {
        return Ok(text.to_string());
    }
    let pattern = label_pattern(labels, placeholder)?;
    let mut current = text.to_string();
    for _ in 0..=text.len() {
        if !pattern.is_match(&current) {
            return Ok(current);
        }
        current = pattern.replace_all(&current, regex::NoExpand(placeholder)).into_owned();
    }
    Err(MeasureError::LabelCollision {
        label: labels.join(", "),
        placeholder: placeholder.to_string(),
    })
}

/// `f_F`: `ln P(y | E') - ln P(y)` with `E'` the label-masked explanation.
pub fn score_prediction_faithfulness<S: Scalar>(
    client: &Client,
    instance: &ExplanationInstance,
    explanation: &str,
    ctx: &ScoringContext<S>,
) -> Result<S> {
    let prediction = instance.prediction();
    let masked = mask_labels(explanation, prediction.label_set(), &ctx.mask_placeholder)?;
    let target = label_words(prediction.label());
    let shown = ctx.log_prob(client, classification_prompt(Some(&masked)), target.clone())?;
    let prior = ctx.log_prob(client, classification_prompt(None), target)?;
    Ok(shown - prior)
}

/// `f_B`: `|E| / |G|` in whitespace tokens over the plain k-hop serialization.
pub fn score_brevity<S: Scalar>(
    instance: &ExplanationInstance,
    explanation: &str,
    ctx: &ScoringContext<S>,
) -> Result<S> {
    let graph_len = word_count(&serialize_plain(instance, ctx.hop_k));
    if graph_len == 0 {
        return Err(MeasureError::DivisionDomain);
    }
    Ok(S::from_count(word_count(explanation)) / S::from_count(graph_len))
}

pub fn score_all<S: Scalar>(
    client: &Client,
    instance: &ExplanationInstance,
    explanation: &str,
    ctx: &ScoringContext<S>,
) -> Result<ScoreTriple<S>> {
    let f_b = score_brevity(instance, explanation, ctx)?;
    let (f_s, f_f) = if ctx.parallel {
        rayon::join(
            || score_input_faithfulness(client, instance, explanation, ctx),
            || score_prediction_faithfulness(client, instance, explanation, ctx),
        )
    } else {
        (
            score_input_faithfulness(client, instance, explanation, ctx),
            score_prediction_faithfulness(client, instance, explanation, ctx),
        )
    };
    Ok(ScoreTriple {
        f_s: f_s?,
        f_f: f_f?,
        f_b,
    })
}
