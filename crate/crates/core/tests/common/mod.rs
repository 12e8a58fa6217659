#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};

use narrator_core::backend::mock::MockBackend;
use narrator_core::backend::Client;
use narrator_core::tag::{NodeRecord, PredictionRecord, SaliencyAnnotation, TextAttributedGraph};
use narrator_core::verbalizer::BfsTree;
use narrator_core::{ExplanationInstance, NodeId, ScoreTriple};
use proptest::prelude::*;
use regex::RegexBuilder;

/// Token `j` of node `i` is `n{i}t{j}`, so every token names its node.
pub fn token(node: NodeId, index: usize) -> String {
    format!("n{node}t{index}")
}

pub fn node_of(token: &str) -> NodeId {
    let rest = token.strip_prefix('n').expect("generated token");
    rest[..rest.find('t').unwrap()].parse().unwrap()
}

pub fn build(
    scores: &[Vec<f64>],
    edges: &BTreeSet<(NodeId, NodeId)>,
    root: NodeId,
    label: &str,
    label_set: &[&str],
) -> ExplanationInstance {
    let nodes = scores
        .iter()
        .enumerate()
        .map(|(i, s)| NodeRecord::new(i, (0..s.len()).map(|j| token(i, j))))
        .collect();
    let graph = TextAttributedGraph::new(nodes, edges.iter().copied(), root).unwrap();
    let token_scores: BTreeMap<NodeId, Vec<f64>> = scores.iter().cloned().enumerate().collect();
    let saliency = SaliencyAnnotation::from_token_scores(&graph, token_scores).unwrap();
    let prediction =
        PredictionRecord::new(label, label_set.iter().map(|s| s.to_string()).collect()).unwrap();
    ExplanationInstance::new("gen", graph, saliency, prediction).unwrap()
}

/// Random graphs of up to `max_nodes` nodes, not necessarily connected, with
/// scores drawn from a small set so ties are common.
pub fn arb_instance(max_nodes: usize) -> impl Strategy<Value = ExplanationInstance> {
    (1..=max_nodes)
        .prop_flat_map(|n| {
            let scores = prop::collection::vec(prop::collection::vec(0u8..6, 1..5), n);
            let pairs = prop::collection::vec((0..n, 0..n), 0..(2 * n));
            (scores, pairs, 0..n)
        })
        .prop_map(|(scores, pairs, root)| {
            let edges = pairs
                .into_iter()
                .filter(|(u, v)| u != v)
                .map(|(u, v)| (u.min(v), u.max(v)))
                .collect();
            let scores: Vec<Vec<f64>> = scores
                .into_iter()
                .map(|s| s.into_iter().map(|x| f64::from(x) * 0.5).collect())
                .collect();
            build(&scores, &edges, root, "A", &["A", "B"])
        })
}

pub struct Oracle {
    pub children: BTreeMap<NodeId, Vec<NodeId>>,
    pub cross: BTreeSet<(NodeId, NodeId)>,
}

/// Level-by-level BFS written against the raw edge list.
pub fn oracle_tree(inst: &ExplanationInstance, k: usize) -> Oracle {
    let g = inst.graph();
    let adjacent = |v: NodeId| -> Vec<NodeId> {
        let mut out: Vec<NodeId> = g
            .edges()
            .iter()
            .filter_map(|&(a, b)| if a == v { Some(b) } else if b == v { Some(a) } else { None })
            .collect();
        out.sort();
        out
    };
    let mut order = vec![g.root()];
    let mut depth = BTreeMap::from([(g.root(), 0)]);
    let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    let mut queue = VecDeque::from([g.root()]);
    while let Some(v) = queue.pop_front() {
        if depth[&v] == k {
            continue;
        }
        for w in adjacent(v) {
            if !depth.contains_key(&w) {
                depth.insert(w, depth[&v] + 1);
                children.entry(v).or_default().push(w);
                order.push(w);
                queue.push_back(w);
            }
        }
    }
    let pos = |v: NodeId| order.iter().position(|&x| x == v).unwrap();
    let tree_edge = |a: NodeId, b: NodeId| {
        children.get(&a).is_some_and(|c| c.contains(&b)) || children.get(&b).is_some_and(|c| c.contains(&a))
    };
    let cross = g
        .edges()
        .iter()
        .filter(|(a, b)| depth.contains_key(a) && depth.contains_key(b) && !tree_edge(*a, *b))
        .map(|&(a, b)| if pos(a) < pos(b) { (a, b) } else { (b, a) })
        .collect();
    Oracle { children, cross }
}

/// Brute-force rationale: a token of the tree is in it when fewer than
/// `ceil(percent% of T)` tokens beat it on (score desc, node asc, index asc).
pub fn rationale_oracle(inst: &ExplanationInstance, tree: &BfsTree, percent: usize) -> BTreeSet<(NodeId, usize)> {
    let tokens: Vec<(NodeId, usize, f64)> = tree
        .visit_order()
        .iter()
        .flat_map(|&v| inst.saliency().token_scores(v).iter().enumerate().map(move |(i, &s)| (v, i, s)))
        .collect();
    let take = (percent * tokens.len()).div_ceil(100);
    tokens
        .iter()
        .filter(|(v, i, s)| {
            tokens
                .iter()
                .filter(|(w, j, t)| t > s || (t == s && (w, j) < (v, i)))
                .count()
                < take
        })
        .map(|&(v, i, _)| (v, i))
        .collect()
}

pub const LABEL_SET: [&str; 3] = ["Theory", "Neural Networks", "Rule Learning"];

/// Four nodes of five tokens each: 20 tokens, so every τ in the default grid
/// masks a different number of words (1 through 6).
pub fn twenty_token_instance() -> ExplanationInstance {
    let scores: Vec<Vec<f64>> = (0..4)
        .map(|i| (0..5).map(|j| f64::from(20 - (i * 5 + j))).collect())
        .collect();
    let edges = BTreeSet::from([(0, 1), (0, 2), (0, 3)]);
    build(&scores, &edges, 0, "Theory", &LABEL_SET)
}

/// Scores the first hidden word by the number of masks in the document and
/// whether an explanation is shown; the first category word by whether an
/// explanation is shown. Every other word has probability one.
pub fn staged(
    fill: BTreeMap<(usize, bool), f64>,
    category: [f64; 2],
    seen: Option<Arc<Mutex<Vec<String>>>>,
) -> Client {
    let scorer = move |_model: &str, context: &str, _word: &str| -> f64 {
        let shown = context.contains("### Explanation");
        if context.ends_with("### Hidden words\n") {
            let document = context.split("### Document\n").nth(1).unwrap();
            let masks = document.split("\n### ").next().unwrap().matches("<mask>").count();
            fill[&(masks, shown)].ln()
        } else if context.ends_with("### Category\n") {
            if let Some(seen) = &seen {
                seen.lock().unwrap().push(context.to_string());
            }
            category[usize::from(shown)].ln()
        } else {
            0.0
        }
    };
    MockBackend::new(0).with_scorer(scorer).into_client()
}

pub fn fill_table(pairs: &[(usize, f64, f64)]) -> BTreeMap<(usize, bool), f64> {
    pairs
        .iter()
        .flat_map(|&(m, with, without)| [((m, true), with), ((m, false), without)])
        .collect()
}

pub fn label_audit(labels: &[&str]) -> regex::Regex {
    let alternation: Vec<String> = labels.iter().map(|l| regex::escape(l)).collect();
    RegexBuilder::new(&alternation.join("|")).case_insensitive(true).build().unwrap()
}

pub fn explanation_shown(prompt: &str) -> Option<&str> {
    let start = prompt.find("### Explanation\n")? + "### Explanation\n".len();
    let end = prompt.rfind("### Category")?;
    Some(&prompt[start..end])
}

/// Every candidate that, on each objective, is beaten strictly by fewer than
/// `ceil(n / 2)` others.
pub fn passing_by_enumeration(pool: &[ScoreTriple<f64>]) -> BTreeSet<usize> {
    let m = pool.len().div_ceil(2);
    (0..pool.len())
        .filter(|&i| {
            let beaten = |better: &dyn Fn(&ScoreTriple<f64>) -> bool| pool.iter().filter(|t| better(t)).count();
            beaten(&|t| t.f_s > pool[i].f_s) < m
                && beaten(&|t| t.f_f > pool[i].f_f) < m
                && beaten(&|t| t.f_b < pool[i].f_b) < m
        })
        .collect()
}
