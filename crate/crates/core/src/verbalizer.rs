//! Turns a saliency-annotated ego graph into a hierarchical, line-oriented
//! document.
//!
//! The ego graph around the root is decomposed into a BFS tree. Tree edges
//! become the section hierarchy (`ROOT`, `Node-1`, `Node-1.2`, ...), rendered in
//! pre-order, one node per line. Every ego-graph edge that is not a tree edge is
//! kept as a cross edge and rendered as a reference sentence at the end of the
//! source node's line: ` [See Node-2.1.]`.
//!
//! BFS visits neighbors in ascending node id, so the same input always yields
//! the same tree and byte-identical text.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::scalar::ceil_fraction;
use crate::tag::{ExplanationInstance, NodeId, TextAttributedGraph};

pub const DEFAULT_HOP_K: usize = 2;
pub const MASK_PLACEHOLDER: &str = "<mask>";
pub const ROOT_HEADER: &str = "ROOT";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerbalizerError {
    #[error("fraction {0} is outside its allowed range")]
    InvalidFraction(f64),
    #[error("malformed paragraph line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("not a rooted tree: {0}")]
    InvalidTree(String),
}

/// BFS decomposition of the k-hop ego graph around the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BfsTree {
    root: NodeId,
    children: BTreeMap<NodeId, Vec<NodeId>>,
    parent: BTreeMap<NodeId, NodeId>,
    depth: BTreeMap<NodeId, usize>,
    cross_edges: BTreeSet<(NodeId, NodeId)>,
    visit_order: Vec<NodeId>,
}

impl BfsTree {
    /// Builds the tree spanning every node within `k` hops of the root.
    pub fn build(graph: &TextAttributedGraph, k: usize) -> Self {
        let root = graph.root();
        let mut depth = BTreeMap::from([(root, 0usize)]);
        let mut parent = BTreeMap::new();
        let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        let mut visit_order = vec![root];
        let mut queue = VecDeque::from([root]);

        while let Some(v) = queue.pop_front() {
            children.entry(v).or_default();
            let d = depth[&v];
            if d >= k {
                continue;
            }
            for &w in graph.neighbors(v) {
                if depth.contains_key(&w) {
                    continue;
                }
                depth.insert(w, d + 1);
                parent.insert(w, v);
                children.entry(v).or_default().push(w);
                visit_order.push(w);
                queue.push_back(w);
            }
        }

        let position: BTreeMap<NodeId, usize> =
            visit_order.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let cross_edges = graph
            .edges()
            .iter()
            .filter(|(u, v)| depth.contains_key(u) && depth.contains_key(v))
            .filter(|(u, v)| parent.get(v) != Some(u) && parent.get(u) != Some(v))
            .map(|&(u, v)| {
                if position[&u] < position[&v] {
                    (u, v)
                } else {
                    (v, u)
                }
            })
            .collect();

        Self {
            root,
            children,
            parent,
            depth,
            cross_edges,
            visit_order,
        }
    }

    /// Assembles a tree from explicit parts, for trees not produced by BFS.
    ///
    /// Every node must be reachable from `root` through `children` exactly
    /// once, and cross edges must join tree nodes that are not already
    /// parent and child.
    pub fn from_parts(
        root: NodeId,
        children: BTreeMap<NodeId, Vec<NodeId>>,
        cross_edges: BTreeSet<(NodeId, NodeId)>,
    ) -> Result<Self, VerbalizerError> {
        let bad = |m: String| Err(VerbalizerError::InvalidTree(m));
        let mut depth = BTreeMap::from([(root, 0usize)]);
        let mut parent = BTreeMap::new();
        let mut full_children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        let mut visit_order = vec![root];
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            let cs = children.get(&v).cloned().unwrap_or_default();
            for &c in &cs {
                if depth.contains_key(&c) {
                    return bad(format!("node {c} is reached twice"));
                }
                depth.insert(c, depth[&v] + 1);
                parent.insert(c, v);
                visit_order.push(c);
                queue.push_back(c);
            }
            full_children.insert(v, cs);
        }
        if let Some(v) = children.keys().find(|v| !depth.contains_key(v)) {
            return bad(format!("node {v} is not reachable from the root"));
        }
        for &(u, v) in &cross_edges {
            if u == v || !depth.contains_key(&u) || !depth.contains_key(&v) {
                return bad(format!("cross edge ({u}, {v}) leaves the tree"));
            }
            if parent.get(&v) == Some(&u) || parent.get(&u) == Some(&v) || cross_edges.contains(&(v, u)) {
                return bad(format!("cross edge ({u}, {v}) duplicates another edge"));
            }
        }
        Ok(Self {
            root,
            children: full_children,
            parent,
            depth,
            cross_edges,
            visit_order,
        })
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.depth.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.visit_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visit_order.is_empty()
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.children.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.parent.get(&id).copied()
    }

    pub fn parents(&self) -> &BTreeMap<NodeId, NodeId> {
        &self.parent
    }

    pub fn depth(&self, id: NodeId) -> Option<usize> {
        self.depth.get(&id).copied()
    }

    /// Non-tree ego edges, oriented from the earlier-visited endpoint.
    pub fn cross_edges(&self) -> &BTreeSet<(NodeId, NodeId)> {
        &self.cross_edges
    }

    /// Retained nodes in BFS visit order.
    pub fn visit_order(&self) -> &[NodeId] {
        &self.visit_order
    }

    /// Root first, then each subtree fully before the next sibling.
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            out.push(v);
            stack.extend(self.children(v).iter().rev());
        }
        out
    }

    /// Dotted section path per node; the root's path is the empty string.
    pub fn section_paths(&self) -> BTreeMap<NodeId, String> {
        let mut paths = BTreeMap::from([(self.root, String::new())]);
        for v in self.preorder() {
            let base = paths[&v].clone();
            for (i, &c) in self.children(v).iter().enumerate() {
                let path = if base.is_empty() {
                    (i + 1).to_string()
                } else {
                    format!("{base}.{}", i + 1)
                };
                paths.insert(c, path);
            }
        }
        paths
    }

    /// Drops non-root nodes whose whole subtree has no token scoring above
    /// `threshold`. The root is always kept, so the tree stays connected.
    pub fn prune(&self, instance: &ExplanationInstance, threshold: f64) -> Self {
        let saliency = instance.saliency();
        let mut keep: BTreeSet<NodeId> = BTreeSet::new();
        // Children are visited after their parent, so the reversed visit order
        // settles every subtree before its root.
        for &v in self.visit_order.iter().rev() {
            let important = saliency
                .max_token_score(v)
                .is_some_and(|max| max > threshold);
            if v == self.root || important || self.children(v).iter().any(|c| keep.contains(c)) {
                keep.insert(v);
            }
        }

        let children = self
            .children
            .iter()
            .filter(|(v, _)| keep.contains(v))
            .map(|(&v, cs)| (v, cs.iter().copied().filter(|c| keep.contains(c)).collect()))
            .collect();
        Self {
            root: self.root,
            children,
            parent: self
                .parent
                .iter()
                .filter(|(c, _)| keep.contains(c))
                .map(|(&c, &p)| (c, p))
                .collect(),
            depth: self
                .depth
                .iter()
                .filter(|(v, _)| keep.contains(v))
                .map(|(&v, &d)| (v, d))
                .collect(),
            cross_edges: self
                .cross_edges
                .iter()
                .filter(|(u, v)| keep.contains(u) && keep.contains(v))
                .copied()
                .collect(),
            visit_order: self
                .visit_order
                .iter()
                .copied()
                .filter(|v| keep.contains(v))
                .collect(),
        }
    }

    /// Every `(node, token index)` in the tree, ordered by descending
    /// saliency; ties go to the lower node id, then the lower token index.
    pub fn ranked_tokens(&self, instance: &ExplanationInstance) -> Vec<TokenRef> {
        let saliency = instance.saliency();
        let mut tokens: Vec<TokenRef> = self
            .visit_order
            .iter()
            .flat_map(|&v| {
                (0..instance.graph().node(v).tokens.len()).map(move |i| TokenRef { node: v, index: i })
            })
            .collect();
        tokens.sort_by(|a, b| {
            let sa = saliency.token_score(a.node, a.index);
            let sb = saliency.token_score(b.node, b.index);
            sb.total_cmp(&sa)
                .then(a.node.cmp(&b.node))
                .then(a.index.cmp(&b.index))
        });
        tokens
    }

    pub fn total_tokens(&self, instance: &ExplanationInstance) -> usize {
        self.visit_order
            .iter()
            .map(|&v| instance.graph().node(v).tokens.len())
            .sum()
    }
}

pub fn build_bfs_tree(instance: &ExplanationInstance, k: usize) -> BfsTree {
    BfsTree::build(instance.graph(), k)
}

pub fn prune(tree: &BfsTree, instance: &ExplanationInstance, threshold: f64) -> BfsTree {
    tree.prune(instance, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenRef {
    pub node: NodeId,
    pub index: usize,
}

/// How a single token is rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenView<'a> {
    Keep,
    Replace(&'a str),
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyParagraph {
    pub text: String,
    pub section_paths: BTreeMap<NodeId, String>,
    pub with_scores: bool,
}

pub fn section_header(path: &str) -> String {
    if path.is_empty() {
        ROOT_HEADER.to_string()
    } else {
        format!("Node-{path}")
    }
}

pub fn render_paragraph(
    tree: &BfsTree,
    instance: &ExplanationInstance,
    with_scores: bool,
) -> SaliencyParagraph {
    render_with(tree, instance, with_scores, |_| TokenView::Keep)
}

/// Renders the tree, letting `view` keep, replace or drop individual tokens.
/// Replaced tokens never carry a score annotation.
pub fn render_with<'a>(
    tree: &BfsTree,
    instance: &ExplanationInstance,
    with_scores: bool,
    view: impl Fn(TokenRef) -> TokenView<'a>,
) -> SaliencyParagraph {
    let section_paths = tree.section_paths();
    let order = tree.preorder();
    let rank: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(i, &v)| (v, i)).collect();

    let mut outgoing: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for &(src, dst) in tree.cross_edges() {
        outgoing.entry(src).or_default().push(dst);
    }
    for dests in outgoing.values_mut() {
        dests.sort_by_key(|d| rank[d]);
    }

    let saliency = instance.saliency();
    let mut lines = Vec::with_capacity(order.len());
    for &v in &order {
        let mut line = section_header(&section_paths[&v]);
        line.push(':');
        for (index, token) in instance.graph().node(v).tokens.iter().enumerate() {
            match view(TokenRef { node: v, index }) {
                TokenView::Drop => {}
                TokenView::Replace(with) => {
                    line.push(' ');
                    line.push_str(with);
                }
                TokenView::Keep => {
                    line.push(' ');
                    line.push_str(token);
                    if with_scores {
                        line.push_str(&format!("({:.2})", saliency.token_score(v, index)));
                    }
                }
            }
        }
        for dst in outgoing.get(&v).into_iter().flatten() {
            line.push_str(&format!(" [See {}.]", section_header(&section_paths[dst])));
        }
        lines.push(line);
    }

    SaliencyParagraph {
        text: lines.join("\n"),
        section_paths,
        with_scores,
    }
}

/// Plain serialization of the whole k-hop ego graph: no scores, no pruning.
pub fn serialize_plain(instance: &ExplanationInstance, k: usize) -> String {
    render_paragraph(&build_bfs_tree(instance, k), instance, false).text
}

/// Whitespace-delimited token count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RationaleToken {
    pub node: NodeId,
    pub index: usize,
    pub token: String,
}

/// The top-τ rationale and the plain serialization with those tokens masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedInstance {
    /// In document order.
    pub rationale_tokens: Vec<RationaleToken>,
    pub masked_document: String,
    pub tau: f64,
}

impl MaskedInstance {
    pub fn rationale_words(&self) -> Vec<String> {
        self.rationale_tokens.iter().map(|t| t.token.clone()).collect()
    }
}

/// Masks the `ceil(tau * T)` most salient tokens of the k-hop ego graph, `T`
/// being its total token count.
pub fn build_masked_instance(
    instance: &ExplanationInstance,
    k: usize,
    tau: f64,
) -> Result<MaskedInstance, VerbalizerError> {
    build_masked_instance_with(instance, k, tau, MASK_PLACEHOLDER)
}

pub fn build_masked_instance_with(
    instance: &ExplanationInstance,
    k: usize,
    tau: f64,
    placeholder: &str,
) -> Result<MaskedInstance, VerbalizerError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(VerbalizerError::InvalidFraction(tau));
    }
    let tree = build_bfs_tree(instance, k);
    let ranked = tree.ranked_tokens(instance);
    let take = ceil_fraction(tau, ranked.len());
    let masked: BTreeSet<TokenRef> = ranked[..take].iter().copied().collect();

    let order = tree.preorder();
    let rationale_tokens = order
        .iter()
        .flat_map(|&v| {
            instance
                .graph()
                .node(v)
                .tokens
                .iter()
                .enumerate()
                .map(move |(index, tok)| (TokenRef { node: v, index }, tok))
        })
        .filter(|(r, _)| masked.contains(r))
        .map(|(r, tok)| RationaleToken {
            node: r.node,
            index: r.index,
            token: tok.clone(),
        })
        .collect();

    let masked_document = render_with(&tree, instance, false, |r| {
        if masked.contains(&r) {
            TokenView::Replace(placeholder)
        } else {
            TokenView::Keep
        }
    })
    .text;

    Ok(MaskedInstance {
        rationale_tokens,
        masked_document,
        tau,
    })
}

/// One parsed line of a rendered paragraph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSection {
    /// Dotted path; empty for the root.
    pub path: String,
    pub tokens: Vec<String>,
    /// Destination paths of the reference sentences on this line.
    pub references: Vec<String>,
}

impl ParsedSection {
    pub fn parent_path(&self) -> Option<&str> {
        if self.path.is_empty() {
            None
        } else {
            Some(self.path.rsplit_once('.').map_or("", |(head, _)| head))
        }
    }
}

fn parse_header(header: &str) -> Option<String> {
    if header == ROOT_HEADER {
        return Some(String::new());
    }
    let path = header.strip_prefix("Node-")?;
    let valid = path
        .split('.')
        .all(|part| !part.is_empty() && part.bytes().all(|b| b.is_ascii_digit()) && !part.starts_with('0'));
    valid.then(|| path.to_string())
}

/// Reads back the section structure of a rendered paragraph.
///
/// Score annotations are left attached to their tokens.
pub fn parse_paragraph(text: &str) -> Result<Vec<ParsedSection>, VerbalizerError> {
    let mut sections = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |reason: &str| VerbalizerError::Parse {
            line: i + 1,
            reason: reason.to_string(),
        };
        let (header, body) = line.split_once(':').ok_or_else(|| err("missing ':'"))?;
        let path = parse_header(header).ok_or_else(|| err("bad section header"))?;
        let mut words: Vec<&str> = body.split_whitespace().collect();
        let mut references = Vec::new();
        while words.len() >= 2 && words[words.len() - 2] == "[See" {
            let target = words[words.len() - 1]
                .strip_suffix(".]")
                .and_then(parse_header)
                .ok_or_else(|| err("bad reference sentence"))?;
            references.push(target);
            words.truncate(words.len() - 2);
        }
        references.reverse();
        sections.push(ParsedSection {
            path,
            tokens: words.into_iter().map(str::to_string).collect(),
            references,
        });
    }
    Ok(sections)
}
