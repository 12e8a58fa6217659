//! Deterministic synthetic corpora for exercising the pipeline without a
//! trained classifier.
//!
//! Each label owns a small cue vocabulary. An instance's root is assigned a
//! label; nodes sharing the root's label carry its cue words with high
//! saliency, every other token gets low saliency. Paired with
//! [`overlap_scorer`], explanations that mention the planted cues score well.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::mock::{MockBackend, OverlapModel};
use crate::backend::simulated::{GeneratorProfile, SimulatedGenerator};
use crate::tag::{ExplanationInstance, NodeId, NodeRecord, PredictionRecord, SaliencyAnnotation, TextAttributedGraph};

pub const LABELS: [&str; 7] = [
    "Case Based",
    "Genetic Algorithms",
    "Neural Networks",
    "Probabilistic Methods",
    "Reinforcement Learning",
    "Rule Learning",
    "Theory",
];

const CUES: [[&str; 8]; 7] = [
    ["precedent", "casebase", "analogical", "retrieval", "similarity", "adaptation", "exemplar", "recall"],
    ["crossover", "mutation", "fitness", "population", "chromosome", "evolutionary", "genome", "offspring"],
    ["backpropagation", "perceptron", "neurons", "activation", "layers", "connectionist", "gradient", "synaptic"],
    ["bayesian", "inference", "likelihood", "posterior", "markov", "belief", "stochastic", "prior"],
    ["reward", "policy", "agent", "qlearning", "exploration", "temporal", "bellman", "episodic"],
    ["induction", "clauses", "decision", "trees", "rulesets", "ilp", "propositional", "covering"],
    ["bounds", "complexity", "pac", "theorem", "sample", "vc", "dimension", "proof"],
];

const GENERIC: [&str; 32] = [
    "paper", "study", "approach", "results", "system", "model", "data", "analysis", "framework",
    "performance", "present", "propose", "experiments", "novel", "technique", "problem",
    "evaluation", "application", "domain", "tasks", "describe", "show", "using", "new", "general",
    "efficient", "large", "real", "world", "simple", "improved", "empirical",
];

/// Cue words of a label in [`LABELS`]; empty for unknown labels.
pub fn label_cues(label: &str) -> &'static [&'static str] {
    LABELS
        .iter()
        .position(|l| *l == label)
        .map(|i| &CUES[i][..])
        .unwrap_or(&[])
}

/// Scoring model that treats a label's cue words as evidence for the label's
/// words.
pub fn overlap_scorer(hit: f64, miss: f64) -> OverlapModel {
    let mut model = OverlapModel::new(hit, miss);
    for label in LABELS {
        for word in label.split_whitespace() {
            model = model.with_cues(word, label_cues(label));
        }
    }
    model
}

/// Hit and miss probabilities of [`simulated_mock`]'s scorer.
pub const SCORER_HIT: f64 = 0.9;
pub const SCORER_MISS: f64 = 0.05;
/// How far each fine-tune moves [`simulated_mock`]'s generator toward its
/// training data.
pub const GENERATOR_LEARNING_RATE: f64 = 0.5;

/// Mock backend pairing a [`SimulatedGenerator`] with [`overlap_scorer`].
/// Learned generator profiles persist in `registry` when given.
pub fn simulated_mock(seed: u64, registry: Option<&Path>) -> std::io::Result<MockBackend> {
    let mut generator =
        SimulatedGenerator::new(GeneratorProfile::default()).with_learning_rate(GENERATOR_LEARNING_RATE);
    if let Some(path) = registry {
        generator = generator.with_registry(path)?;
    }
    Ok(MockBackend::new(seed)
        .with_generator(generator)
        .with_scorer(overlap_scorer(SCORER_HIT, SCORER_MISS)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability of each extra non-tree edge between two random nodes.
    pub extra_edge_prob: f64,
    /// Probability that a non-root node shares the root's label.
    pub homophily: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            min_nodes: 6,
            max_nodes: 14,
            min_tokens: 4,
            max_tokens: 10,
            extra_edge_prob: 0.1,
            homophily: 0.6,
        }
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// One instance; the same `(seed, index)` always yields the same instance.
pub fn synthesize_one(seed: u64, index: usize, config: &SyntheticConfig) -> ExplanationInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = rng.gen_range(config.min_nodes.max(1)..=config.max_nodes.max(config.min_nodes.max(1)));
    let root_class = rng.gen_range(0..LABELS.len());

    let mut nodes = Vec::with_capacity(n);
    let mut scores: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    for id in 0..n {
        let class = if id == 0 || rng.gen_bool(config.homophily) {
            root_class
        } else {
            rng.gen_range(0..LABELS.len())
        };
        let len = rng.gen_range(config.min_tokens.max(1)..=config.max_tokens.max(config.min_tokens.max(1)));
        let mut tokens = Vec::with_capacity(len);
        let mut token_scores = Vec::with_capacity(len);
        for t in 0..len {
            // The root always opens with two planted cues.
            let cue = (id == 0 && t < 2) || rng.gen_bool(0.5);
            if cue {
                tokens.push(*CUES[class].choose(&mut rng).expect("non-empty"));
                let s = if class == root_class {
                    rng.gen_range(4.0..9.0)
                } else {
                    rng.gen_range(0.5..2.0)
                };
                token_scores.push(round2(s));
            } else {
                tokens.push(*GENERIC.choose(&mut rng).expect("non-empty"));
                token_scores.push(round2(rng.gen_range(0.0..1.5)));
            }
        }
        nodes.push(NodeRecord::new(id, tokens));
        scores.insert(id, token_scores);
    }

    let mut edges = BTreeSet::new();
    for v in 1..n {
        edges.insert((rng.gen_range(0..v), v));
    }
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(config.extra_edge_prob) {
                edges.insert((u, v));
            }
        }
    }

    let graph = TextAttributedGraph::new(nodes, edges, 0).expect("synthetic graph is valid");
    let saliency = SaliencyAnnotation::from_token_scores(&graph, scores).expect("scores align");
    let prediction = PredictionRecord::new(
        LABELS[root_class],
        LABELS.iter().map(|l| l.to_string()).collect(),
    )
    .expect("label is in the label set");
    ExplanationInstance::new(format!("syn-{seed}-{index:04}"), graph, saliency, prediction)
        .expect("saliency matches graph")
}

pub fn synthesize(seed: u64, count: usize, config: &SyntheticConfig) -> Vec<ExplanationInstance> {
    (0..count).map(|i| synthesize_one(seed, i, config)).collect()
}
