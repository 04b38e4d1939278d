//! Generation forests.
//!
//! A [`GenForest`] holds the `M` trees sampled for one prompt. Every node is a
//! contiguous segment of generated tokens; a root-to-leaf path concatenates to
//! one complete response. All roots hang off an implicit virtual root that
//! carries no tokens.
//!
//! Forking at `(node, offset)` keeps tokens `0..=offset` in `node` and moves
//! the remaining tokens into a fresh suffix node, so every fork point ends a
//! segment and "one step = one node" holds for credit assignment.

mod io;

pub use io::{read_forest, write_forest, ForestFile, FOREST_FORMAT_VERSION};

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use thiserror::Error;

pub type TokenId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    /// Implicit parent of every root chain.
    pub const VIRTUAL_ROOT: NodeId = NodeId(u32::MAX);

    pub fn is_virtual(self) -> bool {
        self == Self::VIRTUAL_ROOT
    }

    fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_virtual() {
            write!(f, "virtual-root")
        } else {
            write!(f, "n{}", self.0)
        }
    }
}

/// One sampled token and its surprisal `-ln p` in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_id: TokenId,
    pub surprisal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Shannon entropy of the full next-token distribution, when the backend
    /// exposes it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
}

impl TokenRecord {
    pub fn new(token_id: TokenId, surprisal: f64) -> Self {
        Self { token_id, surprisal, text: None, entropy: None }
    }
}

/// The prompt a forest was grown from. Synthetic backends read `tokens`,
/// HTTP backends read `text`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    #[serde(default)]
    pub tokens: Vec<TokenId>,
    #[serde(default)]
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentNode {
    pub id: NodeId,
    pub parent: NodeId,
    pub tokens: Vec<TokenRecord>,
    pub children: Vec<NodeId>,
    /// The segment ends its sequence (end token or length cap).
    pub terminal: bool,
    /// Present iff the node is a terminal leaf.
    pub correct: Option<bool>,
    /// Offset of `tokens[0]` inside the continuation that produced it.
    pub gen_offset: usize,
    /// Length of that continuation; relative positions are measured against it.
    pub gen_len: usize,
}

impl SegmentNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Position of `tokens[offset]` relative to its generating continuation.
    pub fn relative_position(&self, offset: usize) -> f64 {
        (self.gen_offset + offset) as f64 / self.gen_len as f64
    }
}

/// A candidate branching location.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForkPoint {
    pub tree_index: usize,
    pub node_id: NodeId,
    pub token_offset: usize,
    pub surprisal: f64,
}

/// Node ids touched by a fork. `suffix` is set when the segment was split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForkOutcome {
    pub prefix: NodeId,
    pub suffix: Option<NodeId>,
    pub branch: NodeId,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForestError {
    #[error("segment must contain at least one token")]
    InvalidSegment,
    #[error("invalid fork point: {0}")]
    InvalidForkPoint(String),
    #[error("token {offset} of {node} lies in the masked tail")]
    MaskedPosition { node: NodeId, offset: usize },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("{0} is not a leaf")]
    NotALeaf(NodeId),
    #[error("invalid tree configuration: {0}")]
    InvalidConfig(String),
}

/// A structural problem reported by [`GenForest::validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    IdMismatch { slot: usize, id: NodeId },
    RootHasParent(NodeId),
    DuplicateRoot(NodeId),
    DanglingReference { node: NodeId, target: NodeId },
    ParentChildMismatch { parent: NodeId, child: NodeId },
    Cycle(NodeId),
    Unreachable(NodeId),
    EmptySegment(NodeId),
    BadSurprisal { node: NodeId, offset: usize },
    SingleChild(NodeId),
    UngradedLeaf(NodeId),
    GradedInternal(NodeId),
    OpenLeaf(NodeId),
    BadGenerationSpan(NodeId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::IdMismatch { slot, id } => write!(f, "slot {slot} holds node {id}"),
            Violation::RootHasParent(n) => write!(f, "root {n} has a non-virtual parent"),
            Violation::DuplicateRoot(n) => write!(f, "root {n} listed twice"),
            Violation::DanglingReference { node, target } => {
                write!(f, "{node} references missing node {target}")
            }
            Violation::ParentChildMismatch { parent, child } => {
                write!(f, "parent/child links of {parent} and {child} disagree")
            }
            Violation::Cycle(n) => write!(f, "cycle through {n}"),
            Violation::Unreachable(n) => write!(f, "{n} is not reachable from any root"),
            Violation::EmptySegment(n) => write!(f, "{n} has no tokens"),
            Violation::BadSurprisal { node, offset } => {
                write!(f, "token {offset} of {node} has a negative or non-finite surprisal")
            }
            Violation::SingleChild(n) => write!(f, "internal node {n} has a single child"),
            Violation::UngradedLeaf(n) => write!(f, "terminal leaf {n} has no correctness label"),
            Violation::GradedInternal(n) => write!(f, "{n} is labelled but is not a terminal leaf"),
            Violation::OpenLeaf(n) => write!(f, "leaf {n} is not terminal"),
            Violation::BadGenerationSpan(n) => write!(f, "{n} overruns its generation span"),
        }
    }
}

/// Number of leaves of an `(M, N, L, T)` search without early termination.
pub fn expected_leaf_count(m: usize, n: usize, l: usize, t: usize) -> Result<usize, ForestError> {
    if m == 0 {
        return Err(ForestError::InvalidConfig("M must be at least 1".into()));
    }
    Ok(m * (1 + n * l * t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenForest {
    prompt: Prompt,
    roots: Vec<NodeId>,
    nodes: Vec<SegmentNode>,
    mask_tail_fraction: f64,
}

impl GenForest {
    pub fn new(prompt: Prompt) -> Self {
        Self::with_mask(prompt, 0.0)
    }

    /// Forest whose fork operation rejects positions with relative
    /// position `>= 1 - mask_tail_fraction`.
    pub fn with_mask(prompt: Prompt, mask_tail_fraction: f64) -> Self {
        Self { prompt, roots: Vec::new(), nodes: Vec::new(), mask_tail_fraction }
    }

    /// Assemble a forest without checking invariants. Call [`validate`](Self::validate)
    /// on anything that did not come from this module's mutators.
    pub fn from_parts(
        prompt: Prompt,
        roots: Vec<NodeId>,
        nodes: Vec<SegmentNode>,
        mask_tail_fraction: f64,
    ) -> Self {
        Self { prompt, roots, nodes, mask_tail_fraction }
    }

    pub fn prompt(&self) -> &Prompt {
        &self.prompt
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn nodes(&self) -> &[SegmentNode] {
        &self.nodes
    }

    pub fn mask_tail_fraction(&self) -> f64 {
        self.mask_tail_fraction
    }

    pub fn num_trees(&self) -> usize {
        self.roots.len()
    }

    pub fn node(&self, id: NodeId) -> Result<&SegmentNode, ForestError> {
        if id.is_virtual() {
            return Err(ForestError::UnknownNode(id));
        }
        self.nodes.get(id.index()).ok_or(ForestError::UnknownNode(id))
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut SegmentNode, ForestError> {
        if id.is_virtual() {
            return Err(ForestError::UnknownNode(id));
        }
        self.nodes.get_mut(id.index()).ok_or(ForestError::UnknownNode(id))
    }

    /// Children of `id`; the virtual root's children are the tree roots.
    pub fn children(&self, id: NodeId) -> Result<&[NodeId], ForestError> {
        if id.is_virtual() {
            Ok(&self.roots)
        } else {
            Ok(&self.node(id)?.children)
        }
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.is_virtual() || id.index() < self.nodes.len()
    }

    fn next_id(&self) -> NodeId {
        NodeId(self.nodes.len() as u32)
    }

    /// Start a new tree from a freshly sampled chain.
    pub fn add_root_chain(
        &mut self,
        tokens: Vec<TokenRecord>,
        terminal: bool,
        correct: Option<bool>,
    ) -> Result<NodeId, ForestError> {
        if tokens.is_empty() {
            return Err(ForestError::InvalidSegment);
        }
        let id = self.next_id();
        let gen_len = tokens.len();
        self.nodes.push(SegmentNode {
            id,
            parent: NodeId::VIRTUAL_ROOT,
            tokens,
            children: Vec::new(),
            terminal,
            correct: if terminal { correct } else { None },
            gen_offset: 0,
            gen_len,
        });
        self.roots.push(id);
        Ok(id)
    }

    /// Attach `tokens` as a new branch continuing after `point`.
    ///
    /// An interior offset splits the node; the suffix (a fresh id) and the
    /// branch become the prefix's children. Forking at the last token of an
    /// internal node appends a sibling branch.
    pub fn fork(
        &mut self,
        point: &ForkPoint,
        tokens: Vec<TokenRecord>,
        terminal: bool,
        correct: Option<bool>,
    ) -> Result<ForkOutcome, ForestError> {
        if tokens.is_empty() {
            return Err(ForestError::InvalidSegment);
        }
        if point.tree_index >= self.roots.len() {
            return Err(ForestError::InvalidForkPoint(format!(
                "tree index {} out of range",
                point.tree_index
            )));
        }
        let node = self.node(point.node_id)?;
        let len = node.tokens.len();
        if point.token_offset >= len {
            return Err(ForestError::InvalidForkPoint(format!(
                "offset {} beyond segment of length {len}",
                point.token_offset
            )));
        }
        if self.root_of(point.node_id)? != self.roots[point.tree_index] {
            return Err(ForestError::InvalidForkPoint(format!(
                "{} does not belong to tree {}",
                point.node_id, point.tree_index
            )));
        }
        if node.relative_position(point.token_offset) >= 1.0 - self.mask_tail_fraction {
            return Err(ForestError::MaskedPosition { node: point.node_id, offset: point.token_offset });
        }
        let is_last = point.token_offset + 1 == len;
        if is_last && node.is_leaf() {
            return Err(ForestError::InvalidForkPoint(format!(
                "cannot continue past the end of leaf {}",
                point.node_id
            )));
        }

        let branch_id = self.next_id();
        let gen_len = tokens.len();
        let branch = SegmentNode {
            id: branch_id,
            parent: point.node_id,
            tokens,
            children: Vec::new(),
            terminal,
            correct: if terminal { correct } else { None },
            gen_offset: 0,
            gen_len,
        };

        if is_last {
            self.nodes.push(branch);
            self.node_mut(point.node_id)?.children.push(branch_id);
            return Ok(ForkOutcome { prefix: point.node_id, suffix: None, branch: branch_id });
        }

        let suffix_id = NodeId(branch_id.0 + 1);
        let prefix = self.node_mut(point.node_id)?;
        let suffix_tokens = prefix.tokens.split_off(point.token_offset + 1);
        let suffix = SegmentNode {
            id: suffix_id,
            parent: point.node_id,
            tokens: suffix_tokens,
            children: std::mem::replace(&mut prefix.children, vec![suffix_id, branch_id]),
            terminal: std::mem::replace(&mut prefix.terminal, false),
            correct: prefix.correct.take(),
            gen_offset: prefix.gen_offset + point.token_offset + 1,
            gen_len: prefix.gen_len,
        };
        let moved = suffix.children.clone();
        self.nodes.push(branch);
        self.nodes.push(suffix);
        for child in moved {
            self.node_mut(child)?.parent = suffix_id;
        }
        Ok(ForkOutcome { prefix: point.node_id, suffix: Some(suffix_id), branch: branch_id })
    }

    /// Overwrite the correctness label of a terminal leaf.
    pub fn set_correct(&mut self, leaf: NodeId, correct: bool) -> Result<(), ForestError> {
        let node = self.node_mut(leaf)?;
        if !node.is_leaf() {
            return Err(ForestError::NotALeaf(leaf));
        }
        node.terminal = true;
        node.correct = Some(correct);
        Ok(())
    }

    /// The tree root above `id`.
    pub fn root_of(&self, id: NodeId) -> Result<NodeId, ForestError> {
        let mut cur = id;
        let mut steps = 0;
        loop {
            let node = self.node(cur)?;
            if node.parent.is_virtual() {
                return Ok(cur);
            }
            cur = node.parent;
            steps += 1;
            if steps > self.nodes.len() {
                return Err(ForestError::InvalidForkPoint(format!("cycle above {id}")));
            }
        }
    }

    /// Index of the tree containing `id`.
    pub fn tree_index_of(&self, id: NodeId) -> Result<usize, ForestError> {
        let root = self.root_of(id)?;
        self.roots.iter().position(|&r| r == root).ok_or(ForestError::UnknownNode(root))
    }

    /// Nodes from the tree root down to `id`, inclusive.
    pub fn path_from_root(&self, id: NodeId) -> Result<Vec<NodeId>, ForestError> {
        let mut path = Vec::new();
        let mut cur = id;
        while !cur.is_virtual() {
            path.push(cur);
            cur = self.node(cur)?.parent;
            if path.len() > self.nodes.len() {
                return Err(ForestError::InvalidForkPoint(format!("cycle above {id}")));
            }
        }
        path.reverse();
        Ok(path)
    }

    /// Number of proper ancestors, counting the virtual root. Roots have depth 1.
    pub fn depth(&self, id: NodeId) -> Result<usize, ForestError> {
        if id.is_virtual() {
            return Ok(0);
        }
        Ok(self.path_from_root(id)?.len())
    }

    /// Leaves descending from `id` (including `id` itself when it is a leaf),
    /// in depth-first order.
    pub fn leaves_under(&self, id: NodeId) -> Result<Vec<NodeId>, ForestError> {
        if !self.contains(id) {
            return Err(ForestError::UnknownNode(id));
        }
        let mut out = Vec::new();
        let mut stack: Vec<NodeId> = self.children(id)?.iter().rev().copied().collect();
        if !id.is_virtual() && self.node(id)?.is_leaf() {
            return Ok(vec![id]);
        }
        while let Some(cur) = stack.pop() {
            let node = self.node(cur)?;
            if node.is_leaf() {
                out.push(cur);
            } else {
                stack.extend(node.children.iter().rev().copied());
            }
        }
        Ok(out)
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.leaves_under(NodeId::VIRTUAL_ROOT).unwrap_or_default()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn total_tokens(&self) -> usize {
        self.nodes.iter().map(|n| n.tokens.len()).sum()
    }

    /// Full response for `leaf`: the concatenated segments on its root path.
    pub fn root_to_leaf_sequence(&self, leaf: NodeId) -> Result<Vec<TokenRecord>, ForestError> {
        if !self.node(leaf)?.is_leaf() {
            return Err(ForestError::NotALeaf(leaf));
        }
        let mut out = Vec::new();
        for id in self.path_from_root(leaf)? {
            out.extend(self.node(id)?.tokens.iter().cloned());
        }
        Ok(out)
    }

    /// Check every structural invariant; never mutates.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut violations = Vec::new();
        let n = self.nodes.len();
        let exists = |id: NodeId| !id.is_virtual() && id.index() < n;

        for (slot, node) in self.nodes.iter().enumerate() {
            if node.id.index() != slot {
                violations.push(Violation::IdMismatch { slot, id: node.id });
            }
        }
        let mut seen_roots = HashSet::new();
        for &root in &self.roots {
            if !exists(root) {
                violations.push(Violation::DanglingReference { node: NodeId::VIRTUAL_ROOT, target: root });
                continue;
            }
            if !seen_roots.insert(root) {
                violations.push(Violation::DuplicateRoot(root));
            }
            if !self.nodes[root.index()].parent.is_virtual() {
                violations.push(Violation::RootHasParent(root));
            }
        }

        for node in &self.nodes {
            let id = node.id;
            if node.parent.is_virtual() {
                if !seen_roots.contains(&id) {
                    violations.push(Violation::ParentChildMismatch { parent: NodeId::VIRTUAL_ROOT, child: id });
                }
            } else if !exists(node.parent) {
                violations.push(Violation::DanglingReference { node: id, target: node.parent });
            } else {
                let listed = self.nodes[node.parent.index()].children.iter().filter(|&&c| c == id).count();
                if listed != 1 {
                    violations.push(Violation::ParentChildMismatch { parent: node.parent, child: id });
                }
            }
            for &child in &node.children {
                if !exists(child) {
                    violations.push(Violation::DanglingReference { node: id, target: child });
                } else if self.nodes[child.index()].parent != id {
                    violations.push(Violation::ParentChildMismatch { parent: id, child });
                }
            }
            if node.tokens.is_empty() {
                violations.push(Violation::EmptySegment(id));
            }
            for (offset, tok) in node.tokens.iter().enumerate() {
                if !(tok.surprisal.is_finite() && tok.surprisal >= 0.0) {
                    violations.push(Violation::BadSurprisal { node: id, offset });
                }
            }
            if node.children.len() == 1 {
                violations.push(Violation::SingleChild(id));
            }
            if node.is_leaf() {
                if !node.terminal {
                    violations.push(Violation::OpenLeaf(id));
                } else if node.correct.is_none() {
                    violations.push(Violation::UngradedLeaf(id));
                }
            } else if node.correct.is_some() {
                violations.push(Violation::GradedInternal(id));
            }
            if node.gen_offset + node.tokens.len() > node.gen_len {
                violations.push(Violation::BadGenerationSpan(id));
            }
        }

        // Parent-pointer walks catch cycles that never touch a root.
        for node in &self.nodes {
            let mut cur = node.id;
            let mut steps = 0;
            while exists(cur) && !self.nodes[cur.index()].parent.is_virtual() {
                cur = self.nodes[cur.index()].parent;
                steps += 1;
                if steps > n {
                    violations.push(Violation::Cycle(node.id));
                    break;
                }
            }
        }

        let mut reached = vec![false; n];
        let mut stack: Vec<NodeId> = self.roots.iter().copied().filter(|&r| exists(r)).collect();
        while let Some(cur) = stack.pop() {
            if reached[cur.index()] {
                continue;
            }
            reached[cur.index()] = true;
            stack.extend(self.nodes[cur.index()].children.iter().copied().filter(|&c| exists(c)));
        }
        for (slot, hit) in reached.iter().enumerate() {
            if !hit {
                violations.push(Violation::Unreachable(NodeId(slot as u32)));
            }
        }

        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }
}
