//! UCT over fixed-size token blocks.
//!
//! Each expansion samples a full continuation from the selected step's prefix.
//! Its first block becomes the new step and the remainder is the rollout; the
//! whole continuation is stored as one forest branch, so every rollout is a
//! leaf and no token is generated twice.

use super::{finish_report, grade, SearchError, SearchOutput};
use crate::gentree::{ForkPoint, GenForest, NodeId, Prompt};
use crate::mix::hash_words;
use crate::policy::{GenParams, Grader, PolicyBackend};
use serde::{Deserialize, Serialize};

const SEED_MCTS: u64 = 0x4D43_5453;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MctsConfig {
    /// Tokens per step.
    pub block_size: usize,
    /// Children a step gets before selection descends past it.
    pub expansion_width: usize,
    pub c_uct: f64,
    /// Stop once this many tokens have been generated.
    pub token_budget: usize,
    /// Give up after this many consecutive selections that reach a finished step.
    pub max_idle: usize,
    pub gen: GenParams,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            expansion_width: 2,
            c_uct: std::f64::consts::SQRT_2,
            token_budget: 4096,
            max_idle: 1000,
            gen: GenParams::synthetic(),
        }
    }
}

struct Step {
    /// Last token of this step in the forest; `None` for the prompt.
    anchor: Option<(NodeId, usize)>,
    parent: Option<usize>,
    children: Vec<usize>,
    visits: f64,
    value: f64,
    terminal: bool,
    reward: f64,
}

fn uct(parent_visits: f64, s: &Step, c: f64) -> f64 {
    s.value / s.visits + c * (parent_visits.ln() / s.visits).sqrt()
}

pub fn mcts_search(
    backend: &dyn PolicyBackend,
    grader: &dyn Grader,
    prompt: &Prompt,
    cfg: &MctsConfig,
) -> Result<SearchOutput, SearchError> {
    if cfg.token_budget == 0 || cfg.block_size == 0 || cfg.expansion_width == 0 {
        return Err(SearchError::InvalidConfig("budget, block size and width must be positive".into()));
    }
    cfg.gen.validate()?;
    let mut forest = GenForest::with_mask(prompt.clone(), 0.0);
    let mut steps = vec![Step {
        anchor: None,
        parent: None,
        children: Vec::new(),
        visits: 0.0,
        value: 0.0,
        terminal: false,
        reward: 0.0,
    }];
    let mut generated = 0;
    let mut calls = 0;
    let mut idle = 0;
    let mut iteration = 0u64;

    while generated < cfg.token_budget && idle < cfg.max_idle {
        let mut cur = 0;
        while !steps[cur].terminal && steps[cur].children.len() >= cfg.expansion_width {
            let pv = steps[cur].visits;
            let mut best = steps[cur].children[0];
            for &ch in &steps[cur].children[1..] {
                if uct(pv, &steps[ch], cfg.c_uct) > uct(pv, &steps[best], cfg.c_uct) {
                    best = ch;
                }
            }
            cur = best;
        }

        let reward;
        if steps[cur].terminal {
            idle += 1;
            reward = steps[cur].reward;
        } else {
            idle = 0;
            let prefix = match steps[cur].anchor {
                Some((node, off)) => super::prefix_through(&forest, node, off)?,
                None => Vec::new(),
            };
            let gen = cfg.gen.with_seed(hash_words(cfg.gen.seed, &[SEED_MCTS, iteration]));
            iteration += 1;
            let c = backend.sample_continuation(prompt, &prefix, &gen)?;
            if calls == 0 && c.tokens.len() > cfg.token_budget {
                return Err(SearchError::BudgetTooSmall { budget: cfg.token_budget, needed: c.tokens.len() });
            }
            generated += c.tokens.len();
            calls += 1;
            let mut full = prefix.clone();
            full.extend_from_slice(&c.tokens);
            let correct = grade(grader, prompt, &full)?;
            let len = c.tokens.len();
            let branch = match steps[cur].anchor {
                None => forest.add_root_chain(c.tokens, true, Some(correct))?,
                Some((node, off)) => {
                    let point = ForkPoint {
                        tree_index: forest.tree_index_of(node)?,
                        node_id: node,
                        token_offset: off,
                        surprisal: 0.0,
                    };
                    let out = forest.fork(&point, c.tokens, true, Some(correct))?;
                    if let Some(suffix) = out.suffix {
                        for s in steps.iter_mut() {
                            if let Some((n, o)) = s.anchor {
                                if n == node && o > off {
                                    s.anchor = Some((suffix, o - off - 1));
                                }
                            }
                        }
                    }
                    out.branch
                }
            };
            let block = cfg.block_size.min(len);
            reward = if correct { 1.0 } else { 0.0 };
            let id = steps.len();
            steps.push(Step {
                anchor: Some((branch, block - 1)),
                parent: Some(cur),
                children: Vec::new(),
                visits: 0.0,
                value: 0.0,
                terminal: len <= cfg.block_size,
                reward,
            });
            steps[cur].children.push(id);
            cur = id;
        }

        let mut at = Some(cur);
        while let Some(i) = at {
            steps[i].visits += 1.0;
            steps[i].value += reward;
            at = steps[i].parent;
        }
    }

    let leaves = forest.leaf_count();
    let report = finish_report(&forest, generated, calls, leaves)?;
    Ok(SearchOutput { forest, report, fork_events: Vec::new() })
}
