//! Forest samplers: entropy-guided tree expansion, i.i.d. multi-chain
//! sampling and a block-step UCT baseline.
//!
//! Fork-point selection ranks a token `y_t` by its surprisal. Branching "at"
//! `y_t` means resampling it: the new continuation is drawn from the prefix
//! `y_{<t}`, so the tree is forked at the anchor `t - 1`. A node's first token
//! is never a candidate: for a root it has no anchor inside the tree, and for
//! any other node it is the position an earlier fork already resampled.

mod mcts;

pub use mcts::{mcts_search, MctsConfig};

use crate::gentree::{
    expected_leaf_count, ForestError, ForkPoint, GenForest, NodeId, Prompt, TokenId, TokenRecord,
};
use crate::mix::hash_words;
use crate::policy::{BackendError, Continuation, GenParams, GradeError, Grader, PolicyBackend};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

const SEED_ROOT: u64 = 0x526F_6F74;
const SEED_BRANCH: u64 = 0x4272_616E;
const SEED_RANDOM: u64 = 0x5261_6E64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForkStrategy {
    /// Highest surprisal first.
    #[default]
    Entropy,
    /// Uniform without replacement.
    Random,
    /// Highest full-distribution Shannon entropy first. Not the default ranking.
    Shannon,
}

impl std::str::FromStr for ForkStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "entropy" => Ok(Self::Entropy),
            "random" => Ok(Self::Random),
            "shannon" => Ok(Self::Shannon),
            _ => Err(format!("unknown fork strategy {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub m: usize,
    pub n: usize,
    pub l: usize,
    pub t: usize,
    pub mask_tail_fraction: f64,
    pub fork_strategy: ForkStrategy,
    /// Fall back to tail positions instead of failing when the mask leaves
    /// no candidates.
    pub allow_mask_fallback: bool,
    pub gen: GenParams,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self::mnlt(6, 2, 1, 2)
    }
}

impl SearchConfig {
    pub fn mnlt(m: usize, n: usize, l: usize, t: usize) -> Self {
        Self {
            m,
            n,
            l,
            t,
            mask_tail_fraction: 0.2,
            fork_strategy: ForkStrategy::Entropy,
            allow_mask_fallback: false,
            gen: GenParams::synthetic(),
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.m == 0 {
            return Err(SearchError::InvalidConfig("m must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_tail_fraction) {
            return Err(SearchError::InvalidConfig(format!(
                "mask_tail_fraction {} must lie in [0, 1)",
                self.mask_tail_fraction
            )));
        }
        self.gen.validate()?;
        Ok(())
    }

    pub fn expands(&self) -> bool {
        self.n > 0 && self.l > 0 && self.t > 0
    }

    pub fn expected_leaves(&self) -> usize {
        self.m * (1 + self.n * self.l * self.t)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    /// Sum of all continuation lengths returned by the backend.
    pub generated_tokens: usize,
    pub leaves: usize,
    /// Leaves whose token sequences are pairwise distinct.
    pub distinct_leaves: usize,
    pub expected_leaves: usize,
    /// `expected_leaves - leaves`.
    pub shortfall: usize,
    pub backend_calls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForkEvent {
    pub iteration: usize,
    pub tree_index: usize,
    pub node_id: NodeId,
    pub token_offset: usize,
    /// Position of the forked token within its generating continuation.
    pub relative_position: f64,
    pub token_id: TokenId,
    pub surprisal: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutput {
    pub forest: GenForest,
    pub report: BudgetReport,
    pub fork_events: Vec<ForkEvent>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),
    #[error("grading failure: {0}")]
    Grade(GradeError),
    #[error("every candidate position of tree {tree_index} is masked")]
    MaskExhausted { tree_index: usize },
    #[error("forest error: {0}")]
    Forest(#[from] ForestError),
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("token budget {budget} is smaller than one rollout ({needed} tokens)")]
    BudgetTooSmall { budget: usize, needed: usize },
}

/// Label for a finished continuation. Sequences cut off by the length cap are
/// graded wrong.
pub(crate) fn grade(grader: &dyn Grader, prompt: &Prompt, tokens: &[TokenRecord]) -> Result<bool, SearchError> {
    match grader.grade(prompt, tokens) {
        Ok(c) => Ok(c),
        Err(GradeError::NotTerminal) => Ok(false),
        Err(e) => Err(SearchError::Grade(e)),
    }
}

fn path_tokens_before(forest: &GenForest, node: NodeId) -> Result<usize, ForestError> {
    let path = forest.path_from_root(node)?;
    let mut n = 0;
    for id in &path[..path.len() - 1] {
        n += forest.node(*id)?.tokens.len();
    }
    Ok(n)
}

/// Tokens of the response up to and including `tokens[offset]` of `node`.
pub fn prefix_through(forest: &GenForest, node: NodeId, offset: usize) -> Result<Vec<TokenRecord>, ForestError> {
    let mut out = Vec::new();
    for id in forest.path_from_root(node)? {
        let n = forest.node(id)?;
        if id == node {
            out.extend_from_slice(&n.tokens[..=offset]);
        } else {
            out.extend_from_slice(&n.tokens);
        }
    }
    Ok(out)
}

struct Candidate {
    point: ForkPoint,
    score: f64,
    absolute: usize,
}

fn candidates(forest: &GenForest, tree_index: usize, rho: f64, strategy: ForkStrategy, masked: bool) -> Result<Vec<Candidate>, SearchError> {
    let root = *forest
        .roots()
        .get(tree_index)
        .ok_or_else(|| SearchError::InvalidConfig(format!("tree index {tree_index} out of range")))?;
    let mut out = Vec::new();
    let mut stack = vec![root];
    while let Some(id) = stack.pop() {
        let node = forest.node(id)?;
        let base = path_tokens_before(forest, id)?;
        for off in 1..node.tokens.len() {
            let keep = if masked {
                node.relative_position(off) < 1.0 - rho
            } else {
                node.relative_position(off) >= 1.0 - rho && node.relative_position(off - 1) < 1.0 - rho
            };
            if !keep {
                continue;
            }
            let tok = &node.tokens[off];
            let score = match strategy {
                ForkStrategy::Shannon => tok.entropy.unwrap_or(tok.surprisal),
                _ => tok.surprisal,
            };
            out.push(Candidate {
                point: ForkPoint { tree_index, node_id: id, token_offset: off, surprisal: tok.surprisal },
                score,
                absolute: base + off,
            });
        }
        stack.extend(node.children.iter().rev().copied());
    }
    Ok(out)
}

fn rank(mut cands: Vec<Candidate>, n: usize, strategy: ForkStrategy, seed: u64) -> Vec<ForkPoint> {
    match strategy {
        ForkStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = n.min(cands.len());
            rand::seq::index::sample(&mut rng, cands.len(), k)
                .into_iter()
                .map(|i| cands[i].point)
                .collect()
        }
        _ => {
            cands.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then(a.absolute.cmp(&b.absolute))
                    .then(a.point.node_id.cmp(&b.point.node_id))
            });
            cands.into_iter().take(n).map(|c| c.point).collect()
        }
    }
}

/// Top-`n` fork candidates of one tree. Offsets address the token to be
/// resampled; positions at relative offset `>= 1 - rho` are masked.
pub fn select_fork_points(
    forest: &GenForest,
    tree_index: usize,
    n: usize,
    rho: f64,
    strategy: ForkStrategy,
    seed: u64,
) -> Result<Vec<ForkPoint>, SearchError> {
    let cands = candidates(forest, tree_index, rho, strategy, true)?;
    if cands.is_empty() {
        return Err(SearchError::MaskExhausted { tree_index });
    }
    Ok(rank(cands, n, strategy, seed))
}

/// Candidates just past the mask boundary, used when the mask is exhausted.
fn select_fallback(
    forest: &GenForest,
    tree_index: usize,
    n: usize,
    rho: f64,
    strategy: ForkStrategy,
    seed: u64,
) -> Result<Vec<ForkPoint>, SearchError> {
    Ok(rank(candidates(forest, tree_index, rho, strategy, false)?, n, strategy, seed))
}

fn distinct_leaves(forest: &GenForest) -> Result<usize, ForestError> {
    let mut seen = HashSet::new();
    for leaf in forest.leaves() {
        let ids: Vec<TokenId> = forest.root_to_leaf_sequence(leaf)?.iter().map(|t| t.token_id).collect();
        seen.insert(ids);
    }
    Ok(seen.len())
}

pub(crate) fn finish_report(forest: &GenForest, generated: usize, calls: usize, expected: usize) -> Result<BudgetReport, SearchError> {
    let leaves = forest.leaf_count();
    Ok(BudgetReport {
        generated_tokens: generated,
        leaves,
        distinct_leaves: distinct_leaves(forest)?,
        expected_leaves: expected,
        shortfall: expected.saturating_sub(leaves),
        backend_calls: calls,
    })
}

struct Job {
    tree: usize,
    point: ForkPoint,
    branch: usize,
    prefix: Vec<TokenRecord>,
    seed: u64,
}

/// Grow `M` trees, then run `L` rounds of top-`N` forking with `T` branches
/// per fork point.
pub fn eptree_search(
    backend: &dyn PolicyBackend,
    grader: &dyn Grader,
    prompt: &Prompt,
    cfg: &SearchConfig,
) -> Result<SearchOutput, SearchError> {
    cfg.validate()?;
    let expected = expected_leaf_count(cfg.m, cfg.n, cfg.l, cfg.t)?;
    let mut forest = GenForest::with_mask(prompt.clone(), cfg.mask_tail_fraction);
    let mut generated = 0;
    let mut calls = 0;

    let roots: Vec<Continuation> = (0..cfg.m)
        .into_par_iter()
        .map(|i| {
            let g = cfg.gen.with_seed(hash_words(cfg.gen.seed, &[SEED_ROOT, i as u64]));
            backend.sample_continuation(prompt, &[], &g)
        })
        .collect::<Result<_, _>>()?;
    for c in roots {
        generated += c.tokens.len();
        calls += 1;
        let correct = if c.terminal { Some(grade(grader, prompt, &c.tokens)?) } else { None };
        forest.add_root_chain(c.tokens, c.terminal, correct)?;
    }

    let mut events = Vec::new();
    if cfg.expands() {
        for iteration in 0..cfg.l {
            let mut jobs = Vec::new();
            for tree in 0..cfg.m {
                let seed = hash_words(cfg.gen.seed, &[SEED_RANDOM, iteration as u64, tree as u64]);
                let points = match select_fork_points(
                    &forest,
                    tree,
                    cfg.n,
                    cfg.mask_tail_fraction,
                    cfg.fork_strategy,
                    seed,
                ) {
                    Ok(p) => p,
                    Err(SearchError::MaskExhausted { .. }) if cfg.allow_mask_fallback => {
                        select_fallback(&forest, tree, cfg.n, cfg.mask_tail_fraction, cfg.fork_strategy, seed)?
                    }
                    Err(e) => return Err(e),
                };
                for (j, p) in points.iter().enumerate() {
                    let node = forest.node(p.node_id)?;
                    events.push(ForkEvent {
                        iteration,
                        tree_index: tree,
                        node_id: p.node_id,
                        token_offset: p.token_offset,
                        relative_position: node.relative_position(p.token_offset),
                        token_id: node.tokens[p.token_offset].token_id,
                        surprisal: p.surprisal,
                    });
                    let prefix = prefix_through(&forest, p.node_id, p.token_offset - 1)?;
                    for branch in 0..cfg.t {
                        let seed = hash_words(
                            cfg.gen.seed,
                            &[SEED_BRANCH, iteration as u64, tree as u64, j as u64, branch as u64],
                        );
                        jobs.push(Job { tree, point: *p, branch, prefix: prefix.clone(), seed });
                    }
                }
            }
            let results: Vec<Continuation> = jobs
                .par_iter()
                .map(|job| backend.sample_continuation(prompt, &job.prefix, &cfg.gen.with_seed(job.seed)))
                .collect::<Result<_, _>>()?;

            // Splitting a node keeps its id and the offsets of its head, so
            // forks into one node are applied from the highest offset down.
            let mut order: Vec<usize> = (0..jobs.len()).collect();
            order.sort_by(|&a, &b| {
                let (ja, jb) = (&jobs[a], &jobs[b]);
                ja.tree
                    .cmp(&jb.tree)
                    .then(ja.point.node_id.cmp(&jb.point.node_id))
                    .then(jb.point.token_offset.cmp(&ja.point.token_offset))
                    .then(ja.branch.cmp(&jb.branch))
            });
            for idx in order {
                let job = &jobs[idx];
                let c = &results[idx];
                generated += c.tokens.len();
                calls += 1;
                let mut full = job.prefix.clone();
                full.extend_from_slice(&c.tokens);
                let correct = if c.terminal { Some(grade(grader, prompt, &full)?) } else { None };
                let anchor = ForkPoint { token_offset: job.point.token_offset - 1, ..job.point };
                forest.fork(&anchor, c.tokens.clone(), c.terminal, correct)?;
            }
        }
    }

    let report = finish_report(&forest, generated, calls, expected)?;
    Ok(SearchOutput { forest, report, fork_events: events })
}

/// `k` independent chains; the `(k, 0, 0, 0)` special case of [`eptree_search`].
pub fn multichain_sample(
    backend: &dyn PolicyBackend,
    grader: &dyn Grader,
    prompt: &Prompt,
    k: usize,
    gen: &GenParams,
) -> Result<SearchOutput, SearchError> {
    let cfg = SearchConfig { gen: gen.clone(), ..SearchConfig::mnlt(k, 0, 0, 0) };
    eptree_search(backend, grader, prompt, &cfg)
}
