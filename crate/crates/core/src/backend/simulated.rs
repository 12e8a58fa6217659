//! A generator whose output quality follows its fine-tuning data.
//!
//! Each model reference maps to a [`GeneratorProfile`]: how much of the
//! high-saliency vocabulary an explanation covers and how much filler it
//! carries. Fine-tuning sets the new model's profile from the statistics of
//! the training file, so selecting better candidates yields a better model.
//! Used by the mock backend to exercise the expert-iteration loop end to end.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::{LazyLock, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::mock::{normalize_word, CompletionModel};
use super::{BackendError, GenerationRequest, Result};
use crate::finetune::{self, Role};

pub const FILLER_WORDS: [&str; 10] = [
    "overall",
    "broadly",
    "notably",
    "generally",
    "arguably",
    "typically",
    "contextually",
    "somewhat",
    "largely",
    "mostly",
];

const GRAPH_OPEN: &str = "<verbalized-graph>";
const GRAPH_CLOSE: &str = "</verbalized-graph>";
const LABEL_HEADING: &str = "### Classification Label";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorProfile {
    /// Expected fraction of salient words an explanation mentions.
    pub coverage: f64,
    /// Expected number of filler words.
    pub filler: f64,
    /// Per-candidate jitter of the coverage.
    pub spread: f64,
}

impl Default for GeneratorProfile {
    fn default() -> Self {
        Self {
            coverage: 0.25,
            filler: 12.0,
            spread: 0.2,
        }
    }
}

/// What the generator reads out of a generation prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptView {
    pub label: String,
    /// Distinct normalized words of the task graph, by descending best score.
    pub salient: Vec<String>,
    pub vocabulary: BTreeSet<String>,
}

static SCORED_WORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(.+)\((\d+\.\d+)\)$").expect("static regex"));

/// Fraction of the scored vocabulary treated as salient.
const SALIENT_FRACTION: f64 = 0.2;

pub fn read_prompt(prompt: &str) -> Option<PromptView> {
    let start = prompt.rfind(GRAPH_OPEN)? + GRAPH_OPEN.len();
    let end = start + prompt[start..].find(GRAPH_CLOSE)?;
    let graph = &prompt[start..end];
    let label = prompt[end..]
        .find(LABEL_HEADING)
        .map(|i| &prompt[end + i + LABEL_HEADING.len()..])
        .and_then(|rest| rest.lines().map(str::trim).find(|l| !l.is_empty()))?
        .to_string();

    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    let mut vocabulary = BTreeSet::new();
    let mut seen = Vec::new();
    for line in graph.lines() {
        let Some((_, body)) = line.split_once(':') else {
            continue;
        };
        for word in body.split_whitespace() {
            if let Some(caps) = SCORED_WORD.captures(word) {
                let w = normalize_word(&caps[1]);
                let s: f64 = caps[2].parse().unwrap_or(0.0);
                vocabulary.insert(w.clone());
                let e = best.entry(w).or_insert(s);
                *e = e.max(s);
            } else {
                let w = normalize_word(word);
                if vocabulary.insert(w.clone()) {
                    seen.push(w);
                }
            }
        }
    }
    if vocabulary.is_empty() {
        return None;
    }
    // Without scores the generator can only guess, so it leans on the words
    // that come first.
    let ranked: Vec<(String, f64)> = if best.is_empty() {
        seen.into_iter().map(|w| (w, 0.0)).collect()
    } else {
        let mut r: Vec<(String, f64)> = best.into_iter().collect();
        r.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        r
    };
    let keep = ((ranked.len() as f64 * SALIENT_FRACTION).ceil() as usize).max(1);
    Some(PromptView {
        label,
        salient: ranked.into_iter().take(keep).map(|(w, _)| w).collect(),
        vocabulary,
    })
}

pub struct SimulatedGenerator {
    initial: GeneratorProfile,
    learning_rate: f64,
    profiles: RwLock<BTreeMap<String, GeneratorProfile>>,
    registry: Option<PathBuf>,
}

impl SimulatedGenerator {
    pub fn new(initial: GeneratorProfile) -> Self {
        Self {
            initial,
            learning_rate: 1.0,
            profiles: RwLock::new(BTreeMap::new()),
            registry: None,
        }
    }

    /// Fraction of the way a fine-tune moves the profile toward the training
    /// statistics.
    pub fn with_learning_rate(mut self, rate: f64) -> Self {
        self.learning_rate = rate.clamp(0.0, 1.0);
        self
    }

    /// Persists learned profiles to `path`, loading any already there.
    pub fn with_registry(mut self, path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            let loaded: BTreeMap<String, GeneratorProfile> =
                serde_json::from_str(&text).map_err(std::io::Error::other)?;
            *self.profiles.write().unwrap() = loaded;
        }
        self.registry = Some(path);
        Ok(self)
    }

    pub fn profile(&self, model: &str) -> Option<GeneratorProfile> {
        if let Some(p) = self.profiles.read().unwrap().get(model) {
            return Some(*p);
        }
        (!model.contains("@ft")).then_some(self.initial)
    }

    /// Draws depend on the prompt and sample index but not on the model, so
    /// successive generator versions see the same random numbers and differ
    /// only through their profiles.
    fn rng(seed: u64, request: &GenerationRequest, sample: usize) -> ChaCha8Rng {
        let mut h = DefaultHasher::new();
        seed.hash(&mut h);
        request.prompt.hash(&mut h);
        sample.hash(&mut h);
        ChaCha8Rng::seed_from_u64(h.finish())
    }

    fn write_explanation(view: &PromptView, profile: &GeneratorProfile, rng: &mut ChaCha8Rng) -> String {
        let coverage = (profile.coverage + profile.spread * (2.0 * rng.gen::<f64>() - 1.0)).clamp(0.0, 1.0);
        let filler = (profile.filler * (0.5 + rng.gen::<f64>())).round() as usize;
        let mut words = vec![view.label.clone(), "because".to_string()];
        words.extend(
            view.salient
                .iter()
                .filter(|_| rng.gen::<f64>() < coverage)
                .cloned(),
        );
        words.extend((0..filler).map(|_| FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())].to_string()));
        words.join(" ")
    }

    /// Profile statistics of a generator-style fine-tune file.
    pub fn training_profile(&self, dataset: &Path, base: GeneratorProfile) -> Result<GeneratorProfile> {
        let records = finetune::read_file(dataset)
            .map_err(|e| BackendError::Precondition(e.to_string()))?;
        let mut coverage = Vec::new();
        let mut filler = Vec::new();
        for record in &records {
            let user = record.messages.iter().find(|m| m.role == Role::User);
            let answer = record.messages.iter().rev().find(|m| m.role == Role::Assistant);
            let (Some(user), Some(answer)) = (user, answer) else {
                continue;
            };
            let Some(view) = read_prompt(&user.content) else {
                continue;
            };
            let said: BTreeSet<String> = answer.content.split_whitespace().map(normalize_word).collect();
            let hits = view.salient.iter().filter(|w| said.contains(*w)).count();
            coverage.push(hits as f64 / view.salient.len() as f64);
            filler.push(
                answer
                    .content
                    .split_whitespace()
                    .filter(|w| FILLER_WORDS.contains(&normalize_word(w).as_str()))
                    .count() as f64,
            );
        }
        if coverage.is_empty() {
            return Err(BackendError::JobFailed(
                "training file has no generator-style records".into(),
            ));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let rate = self.learning_rate;
        Ok(GeneratorProfile {
            coverage: base.coverage + rate * (mean(&coverage) - base.coverage),
            filler: base.filler + rate * (mean(&filler) - base.filler),
            spread: base.spread,
        })
    }

    fn persist(&self) -> Result<()> {
        let Some(path) = &self.registry else {
            return Ok(());
        };
        let text = serde_json::to_string_pretty(&*self.profiles.read().unwrap())
            .expect("profiles serialize");
        fs::write(path, text + "\n").map_err(|e| BackendError::JobFailed(e.to_string()))
    }
}

impl CompletionModel for SimulatedGenerator {
    fn complete(&self, request: &GenerationRequest, seed: u64) -> Result<Vec<String>> {
        let profile = self
            .profile(&request.model_ref)
            .ok_or_else(|| BackendError::refusal(format!("unknown model {}", request.model_ref)))?;
        let view = read_prompt(&request.prompt)
            .ok_or_else(|| BackendError::refusal("prompt carries no verbalized graph"))?;
        Ok((0..request.n)
            .map(|i| Self::write_explanation(&view, &profile, &mut Self::rng(seed, request, i)))
            .collect())
    }

    fn on_fine_tune(&self, base: &str, new_model: &str, dataset: &Path) -> Result<()> {
        let base_profile = self
            .profile(base)
            .ok_or_else(|| BackendError::JobFailed(format!("unknown base model {base}")))?;
        let learned = self.training_profile(dataset, base_profile)?;
        self.profiles
            .write()
            .unwrap()
            .insert(new_model.to_string(), learned);
        self.persist()
    }
}
