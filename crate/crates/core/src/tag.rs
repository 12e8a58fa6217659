//! Text-attributed graphs, saliency annotations and the JSON interchange format.
//!
//! An [`ExplanationInstance`] is the unit that flows through the pipeline: an
//! undirected simple graph whose nodes carry pre-tokenized text, a saliency
//! annotation aligned token-for-token with that text, and the classifier's
//! prediction for the root node.
//!
//! All types are validated on construction and immutable afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TagError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("reference error: {0}")]
    Reference(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid token in node {node} at index {index}: {reason}")]
    InvalidToken {
        node: NodeId,
        index: usize,
        reason: &'static str,
    },
    #[error("invalid saliency score for node {node}: {value}")]
    InvalidScore { node: NodeId, value: f64 },
    #[error("invalid prediction: {0}")]
    InvalidPrediction(String),
    #[error("saliency graph_ref {found} does not match graph hash {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, TagError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub id: NodeId,
    pub tokens: Vec<String>,
}

impl NodeRecord {
    pub fn new<I, T>(id: NodeId, tokens: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        Self {
            id,
            tokens: tokens.into_iter().map(Into::into).collect(),
        }
    }
}

/// Undirected simple graph with a designated root.
///
/// Nodes are stored sorted by id and ids are dense (`0..N`). Edges are stored
/// normalized as `(min, max)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextAttributedGraph {
    nodes: Vec<NodeRecord>,
    edges: BTreeSet<(NodeId, NodeId)>,
    root: NodeId,
    adjacency: Vec<Vec<NodeId>>,
}

impl TextAttributedGraph {
    pub fn new(
        mut nodes: Vec<NodeRecord>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
        root: NodeId,
    ) -> Result<Self> {
        nodes.sort_by_key(|n| n.id);
        for (expected, node) in nodes.iter().enumerate() {
            if node.id != expected {
                return Err(TagError::InvalidGraph(format!(
                    "node ids must be unique and dense 0..{}; found {} at position {}",
                    nodes.len(),
                    node.id,
                    expected
                )));
            }
            for (index, token) in node.tokens.iter().enumerate() {
                validate_token(node.id, index, token)?;
            }
        }
        if root >= nodes.len() {
            return Err(TagError::Reference(format!("root {root} is not a node")));
        }

        let mut normalized = BTreeSet::new();
        for (u, v) in edges {
            for end in [u, v] {
                if end >= nodes.len() {
                    return Err(TagError::Reference(format!(
                        "edge ({u}, {v}) references missing node {end}"
                    )));
                }
            }
            if u == v {
                return Err(TagError::InvalidGraph(format!("self-loop on node {u}")));
            }
            if !normalized.insert((u.min(v), u.max(v))) {
                return Err(TagError::InvalidGraph(format!("duplicate edge ({u}, {v})")));
            }
        }

        let mut adjacency = vec![Vec::new(); nodes.len()];
        for &(u, v) in &normalized {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }

        Ok(Self {
            nodes,
            edges: normalized,
            root,
            adjacency,
        })
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &NodeRecord {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    /// Edges as `(min, max)` pairs in ascending order.
    pub fn edges(&self) -> &BTreeSet<(NodeId, NodeId)> {
        &self.edges
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.edges.contains(&(u.min(v), u.max(v)))
    }

    /// Neighbors in ascending id order.
    pub fn neighbors(&self, id: NodeId) -> &[NodeId] {
        &self.adjacency[id]
    }

    pub fn total_tokens(&self) -> usize {
        self.nodes.iter().map(|n| n.tokens.len()).sum()
    }

    /// SHA-256 of the canonical serialization of nodes, edges and root.
    ///
    /// Independent of the order nodes and edges were supplied in.
    pub fn content_hash(&self) -> String {
        let doc = GraphDoc {
            edges: self.edges.iter().map(|&(u, v)| [u, v]).collect(),
            nodes: self.nodes.iter().map(NodeDoc::from).collect(),
            root: self.root,
        };
        let bytes = serde_json::to_vec(&doc).expect("graph serialization is infallible");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn validate_token(node: NodeId, index: usize, token: &str) -> Result<()> {
    if token.is_empty() {
        return Err(TagError::InvalidToken {
            node,
            index,
            reason: "empty token",
        });
    }
    if token.contains(['\n', '\r']) {
        return Err(TagError::InvalidToken {
            node,
            index,
            reason: "embedded newline",
        });
    }
    if token.chars().any(char::is_whitespace) {
        return Err(TagError::InvalidToken {
            node,
            index,
            reason: "embedded whitespace",
        });
    }
    Ok(())
}

/// Per-node and per-token importance scores aligned to one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyAnnotation {
    graph_ref: String,
    node_scores: BTreeMap<NodeId, f64>,
    token_scores: BTreeMap<NodeId, Vec<f64>>,
}

impl SaliencyAnnotation {
    pub fn new(
        graph: &TextAttributedGraph,
        node_scores: BTreeMap<NodeId, f64>,
        token_scores: BTreeMap<NodeId, Vec<f64>>,
    ) -> Result<Self> {
        let check = |node: NodeId, value: f64| {
            if value.is_finite() && value >= 0.0 {
                Ok(())
            } else {
                Err(TagError::InvalidScore { node, value })
            }
        };

        for &id in node_scores.keys().chain(token_scores.keys()) {
            if id >= graph.len() {
                return Err(TagError::Reference(format!(
                    "saliency references missing node {id}"
                )));
            }
        }
        for node in graph.nodes() {
            let score = node_scores.get(&node.id).ok_or_else(|| {
                TagError::Alignment(format!("node {} has no node score", node.id))
            })?;
            check(node.id, *score)?;
            let tokens = token_scores.get(&node.id).ok_or_else(|| {
                TagError::Alignment(format!("node {} has no token scores", node.id))
            })?;
            if tokens.len() != node.tokens.len() {
                return Err(TagError::Alignment(format!(
                    "node {} has {} tokens but {} token scores",
                    node.id,
                    node.tokens.len(),
                    tokens.len()
                )));
            }
            for &value in tokens {
                check(node.id, value)?;
            }
        }

        Ok(Self {
            graph_ref: graph.content_hash(),
            node_scores,
            token_scores,
        })
    }

    /// Node score defaults to the sum of its token scores.
    pub fn from_token_scores(
        graph: &TextAttributedGraph,
        token_scores: BTreeMap<NodeId, Vec<f64>>,
    ) -> Result<Self> {
        let node_scores = token_scores
            .iter()
            .map(|(&id, scores)| (id, scores.iter().sum()))
            .collect();
        Self::new(graph, node_scores, token_scores)
    }

    pub fn graph_ref(&self) -> &str {
        &self.graph_ref
    }

    pub fn node_score(&self, id: NodeId) -> f64 {
        self.node_scores[&id]
    }

    pub fn token_scores(&self, id: NodeId) -> &[f64] {
        &self.token_scores[&id]
    }

    pub fn token_score(&self, id: NodeId, index: usize) -> f64 {
        self.token_scores[&id][index]
    }

    /// Largest token score of a node, or `None` when the node has no tokens.
    pub fn max_token_score(&self, id: NodeId) -> Option<f64> {
        self.token_scores[&id].iter().copied().reduce(f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRecord {
    label: String,
    label_set: Vec<String>,
}

impl PredictionRecord {
    pub fn new(label: impl Into<String>, label_set: Vec<String>) -> Result<Self> {
        let label = label.into();
        if label_set.is_empty() {
            return Err(TagError::InvalidPrediction("label_set is empty".into()));
        }
        let unique: BTreeSet<&String> = label_set.iter().collect();
        if unique.len() != label_set.len() {
            return Err(TagError::InvalidPrediction(
                "label_set has duplicate entries".into(),
            ));
        }
        if label_set.iter().any(|l| l.trim().is_empty()) {
            return Err(TagError::InvalidPrediction("blank label in label_set".into()));
        }
        if !label_set.contains(&label) {
            return Err(TagError::InvalidPrediction(format!(
                "label {label:?} is not in label_set"
            )));
        }
        Ok(Self { label, label_set })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationInstance {
    instance_id: String,
    graph: TextAttributedGraph,
    saliency: SaliencyAnnotation,
    prediction: PredictionRecord,
}

impl ExplanationInstance {
    pub fn new(
        instance_id: impl Into<String>,
        graph: TextAttributedGraph,
        saliency: SaliencyAnnotation,
        prediction: PredictionRecord,
    ) -> Result<Self> {
        let expected = graph.content_hash();
        if saliency.graph_ref != expected {
            return Err(TagError::HashMismatch {
                expected,
                found: saliency.graph_ref.clone(),
            });
        }
        Ok(Self {
            instance_id: instance_id.into(),
            graph,
            saliency,
            prediction,
        })
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn graph(&self) -> &TextAttributedGraph {
        &self.graph
    }

    pub fn saliency(&self) -> &SaliencyAnnotation {
        &self.saliency
    }

    pub fn prediction(&self) -> &PredictionRecord {
        &self.prediction
    }

    /// Parses and validates one interchange document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: InstanceDoc =
            serde_json::from_str(text).map_err(|e| TagError::Schema(e.to_string()))?;
        doc.into_instance()
    }

    /// Canonical serialization: fixed key order, nodes and edges sorted,
    /// full-precision numbers, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let mut out = serde_json::to_string(&InstanceDoc::from(self))
            .expect("instance serialization is infallible");
        out.push('\n');
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TagError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_canonical_json()).map_err(|e| TagError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Reads every `*.json` instance in a directory, ordered by file name.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<ExplanationInstance>> {
    let dir = dir.as_ref();
    let io = |e: std::io::Error| TagError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let instance = ExplanationInstance::load(&path)?;
        if !seen.insert(instance.instance_id().to_string()) {
            return Err(TagError::Schema(format!(
                "duplicate instance_id {:?} in {}",
                instance.instance_id(),
                dir.display()
            )));
        }
        out.push(instance);
    }
    Ok(out)
}

// Wire types. Field order is the canonical key order.

#[derive(Serialize)]
struct GraphDoc {
    edges: Vec<[NodeId; 2]>,
    nodes: Vec<NodeDoc>,
    root: NodeId,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: NodeId,
    tokens: Vec<String>,
}

impl From<&NodeRecord> for NodeDoc {
    fn from(node: &NodeRecord) -> Self {
        Self {
            id: node.id,
            tokens: node.tokens.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SaliencyDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    graph_ref: Option<String>,
    node_scores: BTreeMap<NodeId, f64>,
    token_scores: BTreeMap<NodeId, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionDoc {
    label: String,
    label_set: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDoc {
    edges: Vec<[NodeId; 2]>,
    instance_id: String,
    nodes: Vec<NodeDoc>,
    prediction: PredictionDoc,
    root: NodeId,
    saliency: SaliencyDoc,
}

impl InstanceDoc {
    fn into_instance(self) -> Result<ExplanationInstance> {
        let nodes = self
            .nodes
            .into_iter()
            .map(|n| NodeRecord {
                id: n.id,
                tokens: n.tokens,
            })
            .collect();
        let graph =
            TextAttributedGraph::new(nodes, self.edges.into_iter().map(|[u, v]| (u, v)), self.root)?;
        let mut saliency =
            SaliencyAnnotation::new(&graph, self.saliency.node_scores, self.saliency.token_scores)?;
        if let Some(found) = self.saliency.graph_ref {
            saliency.graph_ref = found;
        }
        let prediction = PredictionRecord::new(self.prediction.label, self.prediction.label_set)?;
        ExplanationInstance::new(self.instance_id, graph, saliency, prediction)
    }
}

impl From<&ExplanationInstance> for InstanceDoc {
    fn from(x: &ExplanationInstance) -> Self {
        Self {
            edges: x.graph.edges.iter().map(|&(u, v)| [u, v]).collect(),
            instance_id: x.instance_id.clone(),
            nodes: x.graph.nodes.iter().map(NodeDoc::from).collect(),
            prediction: PredictionDoc {
                label: x.prediction.label.clone(),
                label_set: x.prediction.label_set.clone(),
            },
            root: x.graph.root,
            saliency: SaliencyDoc {
                graph_ref: Some(x.saliency.graph_ref.clone()),
                node_scores: x.saliency.node_scores.clone(),
                token_scores: x.saliency.token_scores.clone(),
            },
        }
    }
}
