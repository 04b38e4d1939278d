//! Process rewards from a graded generation forest.
//!
//! Every node's value is the fraction of correct leaves below it. The global
//! advantage compares a node to the virtual root (the whole forest's success
//! rate), the local advantage compares it to its parent. Values are kept as
//! integer ratios and only converted to `f64` when a reward is produced.

use crate::gentree::{ForestError, GenForest, NodeId, TokenRecord};
use crate::textfmt::format_f64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CreditError {
    #[error("leaf {0} has no correctness label")]
    UngradedLeaf(NodeId),
    #[error("invalid reward scheme: {0}")]
    InvalidScheme(String),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

/// Weights of the ancestor-sum reward. Ancestor `j` at depth `d` (the virtual
/// root has depth 0, tree roots depth 1) gets `by_depth[d]`, plus `parent`
/// when it is the direct parent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaeWeights {
    #[serde(default)]
    pub by_depth: Vec<f64>,
    #[serde(default)]
    pub parent: f64,
}

impl GaeWeights {
    /// Root plus parent with unit weight; equal to [`RewardScheme::PlainSum`].
    pub fn root_and_parent() -> Self {
        Self { by_depth: vec![1.0], parent: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum RewardScheme {
    /// `(G_A + L_A) / sqrt(n)`
    #[default]
    ReweightedSum,
    /// `G_A + L_A`
    PlainSum,
    /// `G_A / sqrt(n)`
    GlobalOnlyReweighted,
    /// `sum_j lambda_j (V(node) - V(ancestor_j))`
    Gae(GaeWeights),
}

impl RewardScheme {
    pub fn validate(&self) -> Result<(), CreditError> {
        if let RewardScheme::Gae(w) = self {
            if !w.parent.is_finite() || w.by_depth.iter().any(|x| !x.is_finite()) {
                return Err(CreditError::InvalidScheme("GAE weights must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn from_name(name: &str) -> Result<Self, CreditError> {
        match name {
            "reweighted_sum" => Ok(Self::ReweightedSum),
            "plain_sum" => Ok(Self::PlainSum),
            "global_only_reweighted" => Ok(Self::GlobalOnlyReweighted),
            "gae" => Ok(Self::Gae(GaeWeights::root_and_parent())),
            other => Err(CreditError::InvalidScheme(other.to_string())),
        }
    }
}

/// Process reward of one node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReward {
    pub node_id: NodeId,
    pub value: f64,
    pub global_adv: f64,
    pub local_adv: f64,
    pub reward: f64,
    pub leaf_count: u64,
}

/// A root-to-leaf sequence with its per-token advantages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub prompt_id: String,
    pub prompt_tokens: Vec<u32>,
    pub tokens: Vec<TokenRecord>,
    pub per_token_advantage: Vec<f64>,
    pub leaf_id: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Ratio {
    num: i128,
    den: i128,
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.abs()
}

impl Ratio {
    fn reduced(num: i128, den: i128) -> Ratio {
        let g = gcd(num, den).max(1);
        Ratio { num: num / g, den: den / g }
    }

    fn diff(self, other: Ratio) -> Ratio {
        Ratio::reduced(self.num * other.den - other.num * self.den, self.den * other.den)
    }

    fn add(self, other: Ratio) -> Ratio {
        Ratio::reduced(self.num * other.den + other.num * self.den, self.den * other.den)
    }

    fn scale(self, k: i128) -> Ratio {
        Ratio::reduced(self.num * k, self.den)
    }

    fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Correct/total leaf counts for every node of a graded forest.
#[derive(Clone, Debug)]
pub struct CreditTable<'a> {
    forest: &'a GenForest,
    counts: HashMap<NodeId, (u64, u64)>,
    root: (u64, u64),
}

impl<'a> CreditTable<'a> {
    pub fn new(forest: &'a GenForest) -> Result<Self, CreditError> {
        let mut counts: HashMap<NodeId, (u64, u64)> = HashMap::with_capacity(forest.nodes().len());
        // iterative post-order
        let mut stack: Vec<(NodeId, bool)> = forest.roots().iter().rev().map(|&r| (r, false)).collect();
        while let Some((id, expanded)) = stack.pop() {
            let node = forest.node(id)?;
            if node.is_leaf() {
                let correct = node.correct.ok_or(CreditError::UngradedLeaf(id))?;
                counts.insert(id, (correct as u64, 1));
            } else if expanded {
                let mut acc = (0, 0);
                for c in &node.children {
                    let (a, b) = counts[c];
                    acc.0 += a;
                    acc.1 += b;
                }
                counts.insert(id, acc);
            } else {
                stack.push((id, true));
                stack.extend(node.children.iter().rev().map(|&c| (c, false)));
            }
        }
        let root = forest.roots().iter().fold((0, 0), |acc, r| {
            let (a, b) = counts[r];
            (acc.0 + a, acc.1 + b)
        });
        if root.1 == 0 {
            return Err(CreditError::Forest(ForestError::InvalidConfig("forest has no leaves".into())));
        }
        Ok(Self { forest, counts, root })
    }

    fn counts(&self, id: NodeId) -> Result<(u64, u64), CreditError> {
        if id.is_virtual() {
            return Ok(self.root);
        }
        self.counts.get(&id).copied().ok_or(CreditError::Forest(ForestError::UnknownNode(id)))
    }

    fn ratio(&self, id: NodeId) -> Result<Ratio, CreditError> {
        let (c, n) = self.counts(id)?;
        Ok(Ratio { num: c as i128, den: n as i128 })
    }

    pub fn leaf_count(&self, id: NodeId) -> Result<u64, CreditError> {
        Ok(self.counts(id)?.1)
    }

    pub fn correct_count(&self, id: NodeId) -> Result<u64, CreditError> {
        Ok(self.counts(id)?.0)
    }

    pub fn value(&self, id: NodeId) -> Result<f64, CreditError> {
        Ok(self.ratio(id)?.to_f64())
    }

    fn parent(&self, id: NodeId) -> Result<NodeId, CreditError> {
        Ok(self.forest.node(id)?.parent)
    }

    fn exact_advantages(&self, id: NodeId) -> Result<(Ratio, Ratio), CreditError> {
        let v = self.ratio(id)?;
        let root = self.ratio(NodeId::VIRTUAL_ROOT)?;
        if id.is_virtual() {
            let zero = v.diff(v);
            return Ok((zero, zero));
        }
        let parent = self.ratio(self.parent(id)?)?;
        Ok((v.diff(root), v.diff(parent)))
    }

    /// `(G_A, L_A)`. The virtual root has zero advantages.
    pub fn advantages(&self, id: NodeId) -> Result<(f64, f64), CreditError> {
        let (g, l) = self.exact_advantages(id)?;
        Ok((g.to_f64(), l.to_f64()))
    }

    pub fn step_reward(&self, id: NodeId, scheme: &RewardScheme) -> Result<StepReward, CreditError> {
        scheme.validate()?;
        let (g, l) = self.exact_advantages(id)?;
        let n = self.leaf_count(id)?;
        let scale = (n as f64).sqrt();
        let reward = match scheme {
            RewardScheme::ReweightedSum => g.add(l).to_f64() / scale,
            RewardScheme::PlainSum => g.add(l).to_f64(),
            RewardScheme::GlobalOnlyReweighted => g.to_f64() / scale,
            RewardScheme::Gae(w) => self.gae_reward(id, w)?,
        };
        Ok(StepReward {
            node_id: id,
            value: self.value(id)?,
            global_adv: g.to_f64(),
            local_adv: l.to_f64(),
            reward,
            leaf_count: n,
        })
    }

    fn gae_reward(&self, id: NodeId, w: &GaeWeights) -> Result<f64, CreditError> {
        if id.is_virtual() {
            return Ok(0.0);
        }
        let v = self.ratio(id)?;
        let path = self.forest.path_from_root(id)?;
        let parent = self.parent(id)?;
        // ancestors: virtual root (depth 0) then path[..len-1] at depths 1..
        let ancestors = std::iter::once(NodeId::VIRTUAL_ROOT).chain(path[..path.len() - 1].iter().copied());
        // integer weights are summed exactly so special cases match the
        // closed-form schemes bit for bit
        let mut exact = Ratio { num: 0, den: 1 };
        let mut inexact = 0.0;
        for (depth, anc) in ancestors.enumerate() {
            let mut lambda = w.by_depth.get(depth).copied().unwrap_or(0.0);
            if anc == parent {
                lambda += w.parent;
            }
            if lambda == 0.0 {
                continue;
            }
            let d = v.diff(self.ratio(anc)?);
            if lambda.fract() == 0.0 && lambda.abs() < 1e12 {
                exact = exact.add(d.scale(lambda as i128));
            } else {
                inexact += lambda * d.to_f64();
            }
        }
        Ok(exact.to_f64() + inexact)
    }

    /// One example per leaf; every token carries its segment's reward.
    pub fn training_batch(&self, scheme: &RewardScheme) -> Result<Vec<TrainingExample>, CreditError> {
        scheme.validate()?;
        let mut rewards: HashMap<NodeId, f64> = HashMap::with_capacity(self.counts.len());
        for node in self.forest.nodes() {
            rewards.insert(node.id, self.step_reward(node.id, scheme)?.reward);
        }
        let prompt = self.forest.prompt();
        self.forest
            .leaves()
            .into_iter()
            .map(|leaf| {
                let mut tokens = Vec::new();
                let mut adv = Vec::new();
                for id in self.forest.path_from_root(leaf)? {
                    let node = self.forest.node(id)?;
                    tokens.extend(node.tokens.iter().cloned());
                    adv.extend(std::iter::repeat(rewards[&id]).take(node.tokens.len()));
                }
                Ok(TrainingExample {
                    prompt_id: prompt.id.clone(),
                    prompt_tokens: prompt.tokens.clone(),
                    tokens,
                    per_token_advantage: adv,
                    leaf_id: leaf,
                })
            })
            .collect()
    }
}

pub fn node_value(forest: &GenForest, id: NodeId) -> Result<f64, CreditError> {
    CreditTable::new(forest)?.value(id)
}

pub fn advantages(forest: &GenForest, id: NodeId) -> Result<(f64, f64), CreditError> {
    CreditTable::new(forest)?.advantages(id)
}

pub fn step_reward(forest: &GenForest, id: NodeId, scheme: &RewardScheme) -> Result<StepReward, CreditError> {
    CreditTable::new(forest)?.step_reward(id, scheme)
}

pub fn training_batch(forest: &GenForest, scheme: &RewardScheme) -> Result<Vec<TrainingExample>, CreditError> {
    CreditTable::new(forest)?.training_batch(scheme)
}

#[derive(Serialize)]
struct BatchRecord<'a> {
    prompt_id: &'a str,
    leaf_id: u32,
    token_ids: Vec<u32>,
    advantages: Vec<String>,
}

/// One JSON line per example; advantages as 17-significant-digit decimals.
pub fn write_batch<W: Write>(batch: &[TrainingExample], mut out: W) -> std::io::Result<()> {
    for ex in batch {
        let rec = BatchRecord {
            prompt_id: &ex.prompt_id,
            leaf_id: ex.leaf_id.0,
            token_ids: ex.tokens.iter().map(|t| t.token_id).collect(),
            advantages: ex.per_token_advantage.iter().map(|&a| format_f64(a)).collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
