//! Policy-gradient loops over the synthetic policy.
//!
//! TreeRL samples a forest per prompt and trains on its per-segment process
//! rewards. ChainRL samples `K` independent chains per prompt and spreads a
//! group-relative outcome advantage over every token of a chain.

use crate::credit::{CreditError, CreditTable, RewardScheme, TrainingExample};
use crate::gentree::{NodeId, Prompt};
use crate::mix::hash_words;
use crate::policy::{ChainSum, GenParams, SynthPolicy, UpdateError};
use crate::search::{eptree_search, multichain_sample, SearchConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

const STREAM_TRAIN: u64 = 0x5452_4149;
const STREAM_EVAL: u64 = 0x4556_414C;
const SEED_SAMPLE: u64 = 0x5341_4D50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageVariant {
    /// `(r - mean) / std` with the population standard deviation.
    #[default]
    Grpo,
    /// `r_i - mean(r_{j != i})`
    Rloo,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("group of {0} rewards is too small; need at least 2")]
    GroupTooSmall(usize),
    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },
    #[error(transparent)]
    Update(#[from] UpdateError),
}

/// Group-relative advantages of one prompt's chain rewards.
pub fn chain_advantages(rewards: &[f64], variant: AdvantageVariant) -> Result<Vec<f64>, TrainError> {
    let k = rewards.len();
    if k < 2 {
        return Err(TrainError::GroupTooSmall(k));
    }
    let sum: f64 = rewards.iter().sum();
    let mean = sum / k as f64;
    Ok(match variant {
        AdvantageVariant::Grpo => {
            let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / k as f64;
            let std = var.sqrt();
            if std == 0.0 {
                vec![0.0; k]
            } else {
                rewards.iter().map(|r| (r - mean) / std).collect()
            }
        }
        AdvantageVariant::Rloo => {
            let kf = k as f64;
            rewards.iter().map(|&r| r - (sum - r) / (kf - 1.0)).collect()
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    TreeRl { search: SearchConfig, scheme: RewardScheme },
    ChainRl { k: usize, variant: AdvantageVariant, gen: GenParams },
}

impl Sampler {
    pub fn name(&self) -> &'static str {
        match self {
            Sampler::TreeRl { .. } => "treerl",
            Sampler::ChainRl { .. } => "chainrl",
        }
    }

    pub fn gen(&self) -> &GenParams {
        match self {
            Sampler::TreeRl { search, .. } => &search.gen,
            Sampler::ChainRl { gen, .. } => gen,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sampler: Sampler,
    pub prompts_per_step: usize,
    /// Base learning rate; the applied rate is `lr * lr_multiplier`.
    pub lr: f64,
    pub lr_multiplier: f64,
    pub kl_beta: f64,
    /// Average each sequence's token terms instead of summing them.
    #[serde(default)]
    pub length_normalize: bool,
    pub steps: usize,
    pub seed: u64,
    /// Evaluate every this many steps (and after the last one).
    pub eval_every: usize,
    pub eval_prompts: usize,
    /// Sampled chains per held-out prompt for PassRate; 0 disables it.
    pub eval_passrate_samples: usize,
    /// Seed of the held-out prompt stream, shared across training seeds.
    pub eval_seed: u64,
    /// Write a snapshot every this many steps; 0 disables snapshots.
    pub snapshot_every: usize,
}

impl TrainConfig {
    pub fn new(sampler: Sampler) -> Self {
        Self {
            sampler,
            prompts_per_step: 16,
            lr: 1.5e-6,
            lr_multiplier: 1.0,
            kl_beta: 1e-4,
            length_normalize: false,
            steps: 100,
            seed: 0,
            eval_every: 10,
            eval_prompts: 200,
            eval_passrate_samples: 0,
            eval_seed: 0xE7A1,
            snapshot_every: 0,
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr * self.lr_multiplier
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.prompts_per_step == 0 {
            return Err(TrainError::InvalidConfig("prompts_per_step must be at least 1".into()));
        }
        let lr = self.effective_lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("effective lr {lr} must be positive")));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(TrainError::InvalidConfig("kl_beta must be non-negative".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::InvalidConfig("eval_every must be positive".into()));
        }
        match &self.sampler {
            Sampler::TreeRl { search, scheme } => {
                search.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
                scheme.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
            }
            Sampler::ChainRl { k, gen, .. } => {
                if *k < 2 {
                    return Err(TrainError::GroupTooSmall(*k));
                }
                gen.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub greedy_accuracy: f64,
    /// Fraction of correct sampled chains.
    pub sampled_accuracy: Option<f64>,
    pub passrate: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    Greedy,
    Sampled,
    PassRate,
}

impl EvalPoint {
    pub fn get(&self, metric: EvalMetric) -> Option<f64> {
        match metric {
            EvalMetric::Greedy => Some(self.greedy_accuracy),
            EvalMetric::Sampled => self.sampled_accuracy,
            EvalMetric::PassRate => self.passrate,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub sequences: usize,
    pub step_tokens: usize,
    pub cumulative_tokens: usize,
    pub grad_norm: f64,
    pub mean_kl: f64,
    pub skipped_prompts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalPoint>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial: EvalPoint,
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn cumulative_tokens(&self) -> usize {
        self.records.last().map_or(0, |r| r.cumulative_tokens)
    }

    /// `(cumulative_tokens, value)` at every evaluated step that reports
    /// `metric`, starting with the untrained policy at zero tokens.
    pub fn eval_curve(&self, metric: EvalMetric) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self.initial.get(metric).map(|v| (0, v)).into_iter().collect();
        out.extend(
            self.records
                .iter()
                .filter_map(|r| r.eval.as_ref().and_then(|e| e.get(metric)).map(|v| (r.cumulative_tokens, v))),
        );
        out
    }

    /// `metric` at the last evaluation within `budget` tokens.
    pub fn accuracy_at_budget(&self, budget: usize, metric: EvalMetric) -> Option<f64> {
        self.eval_curve(metric)
            .into_iter()
            .take_while(|&(t, _)| t <= budget)
            .last()
            .map(|(_, a)| a)
    }
}

/// Deterministic training and held-out prompt streams. Training prompts that
/// collide with a held-out prompt are skipped, so the sets are disjoint.
#[derive(Clone, Debug)]
pub struct PromptPool {
    task: ChainSum,
    train_seed: u64,
    heldout: Vec<Prompt>,
    heldout_keys: HashSet<Vec<u32>>,
}

impl PromptPool {
    pub fn new(task: ChainSum, seed: u64, eval_seed: u64, eval_prompts: usize) -> Self {
        let eval_stream = hash_words(eval_seed, &[STREAM_EVAL]);
        let mut heldout = Vec::with_capacity(eval_prompts);
        let mut heldout_keys = HashSet::new();
        let mut i = 0;
        while heldout.len() < eval_prompts {
            let p = task.prompt(eval_stream, i);
            i += 1;
            if heldout_keys.insert(p.tokens.clone()) {
                heldout.push(p);
            }
        }
        Self { task, train_seed: hash_words(seed, &[STREAM_TRAIN]), heldout, heldout_keys }
    }

    pub fn heldout(&self) -> &[Prompt] {
        &self.heldout
    }

    /// Training prompts for one step.
    pub fn batch(&self, step: usize, size: usize) -> Vec<Prompt> {
        let mut out = Vec::with_capacity(size);
        let mut i = 0u64;
        while out.len() < size {
            let p = self.task.prompt(self.train_seed, ((step as u64) << 32) | i);
            i += 1;
            if !self.heldout_keys.contains(&p.tokens) {
                out.push(p);
            }
        }
        out
    }
}

/// Collected samples for one gradient step.
#[derive(Clone, Debug, Default)]
pub struct StepBatch {
    pub examples: Vec<TrainingExample>,
    pub tokens: usize,
    pub reward_sum: f64,
    pub reward_count: usize,
    pub skipped: usize,
}

enum PromptSamples {
    Ok { examples: Vec<TrainingExample>, tokens: usize, reward_sum: f64, reward_count: usize },
    Skipped,
}

fn merge(parts: Vec<PromptSamples>) -> StepBatch {
    let mut b = StepBatch::default();
    for p in parts {
        match p {
            PromptSamples::Ok { examples, tokens, reward_sum, reward_count } => {
                b.examples.extend(examples);
                b.tokens += tokens;
                b.reward_sum += reward_sum;
                b.reward_count += reward_count;
            }
            PromptSamples::Skipped => b.skipped += 1,
        }
    }
    b
}

fn prompt_seed(base: u64, step: usize, i: usize) -> u64 {
    hash_words(base, &[SEED_SAMPLE, step as u64, i as u64])
}

/// Forest samples with process-reward advantages.
pub fn treerl_batch(
    policy: &SynthPolicy,
    prompts: &[Prompt],
    search: &SearchConfig,
    scheme: &RewardScheme,
    seed: u64,
    step: usize,
) -> Result<StepBatch, TrainError> {
    let task = *policy.task();
    let parts = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut cfg = search.clone();
            cfg.gen.seed = prompt_seed(seed, step, i);
            let out = match eptree_search(policy, &task, p, &cfg) {
                Ok(o) => o,
                Err(e) => {
                    log::warn!("step {step}: prompt {} skipped: {e}", p.id);
                    return Ok(PromptSamples::Skipped);
                }
            };
            let table = CreditTable::new(&out.forest).map_err(credit_err(step))?;
            let examples = table.training_batch(scheme).map_err(credit_err(step))?;
            let correct = table.correct_count(NodeId::VIRTUAL_ROOT).map_err(credit_err(step))?;
            let leaves = table.leaf_count(NodeId::VIRTUAL_ROOT).map_err(credit_err(step))?;
            Ok(PromptSamples::Ok {
                examples,
                tokens: out.report.generated_tokens,
                reward_sum: correct as f64,
                reward_count: leaves as usize,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(merge(parts))
}

fn credit_err(step: usize) -> impl Fn(CreditError) -> TrainError {
    move |e| TrainError::NonFinite { step, what: e.to_string() }
}

/// Independent chains with group-relative outcome advantages.
pub fn chainrl_batch(
    policy: &SynthPolicy,
    prompts: &[Prompt],
    k: usize,
    variant: AdvantageVariant,
    gen: &GenParams,
    seed: u64,
    step: usize,
) -> Result<StepBatch, TrainError> {
    let task = *policy.task();
    let parts = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let g = gen.with_seed(prompt_seed(seed, step, i));
            let out = match multichain_sample(policy, &task, p, k, &g) {
                Ok(o) => o,
                Err(e) => {
                    log::warn!("step {step}: prompt {} skipped: {e}", p.id);
                    return Ok(PromptSamples::Skipped);
                }
            };
            let f = &out.forest;
            let rewards: Vec<f64> = f
                .roots()
                .iter()
                .map(|&r| if f.node(r).ok().and_then(|n| n.correct) == Some(true) { 1.0 } else { 0.0 })
                .collect();
            let adv = chain_advantages(&rewards, variant)?;
            let examples = f
                .roots()
                .iter()
                .zip(&adv)
                .map(|(&r, &a)| {
                    let node = f.node(r).expect("root exists");
                    TrainingExample {
                        prompt_id: p.id.clone(),
                        prompt_tokens: p.tokens.clone(),
                        tokens: node.tokens.clone(),
                        per_token_advantage: vec![a; node.tokens.len()],
                        leaf_id: r,
                    }
                })
                .collect();
            Ok(PromptSamples::Ok {
                examples,
                tokens: out.report.generated_tokens,
                reward_sum: rewards.iter().sum(),
                reward_count: k,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(merge(parts))
}

/// Greedy accuracy and optional sampled PassRate on `prompts`.
pub fn evaluate(policy: &SynthPolicy, prompts: &[Prompt], samples: usize, gen: &GenParams) -> EvalPoint {
    let task = *policy.task();
    let rows: Vec<(bool, usize)> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let greedy = policy.greedy_correct(p, gen.max_new_tokens).unwrap_or(false);
            let correct = if samples > 0 {
                multichain_sample(policy, &task, p, samples, &gen.with_seed(hash_words(gen.seed, &[i as u64])))
                    .map(|o| o.forest.nodes().iter().filter(|n| n.correct == Some(true)).count())
                    .unwrap_or(0)
            } else {
                0
            };
            (greedy, correct)
        })
        .collect();
    let n = rows.len().max(1) as f64;
    EvalPoint {
        greedy_accuracy: rows.iter().filter(|r| r.0).count() as f64 / n,
        sampled_accuracy: (samples > 0)
            .then(|| rows.iter().map(|r| r.1).sum::<usize>() as f64 / (n * samples as f64)),
        passrate: (samples > 0).then(|| rows.iter().filter(|r| r.1 > 0).count() as f64 / n),
    }
}

/// Hook called after each step with the current policy and history.
pub trait TrainObserver {
    fn on_step(&mut self, _policy: &SynthPolicy, _history: &TrainHistory) {}
}

impl TrainObserver for () {}

/// One sampling + gradient step.
pub fn train_step(
    policy: &mut SynthPolicy,
    cfg: &TrainConfig,
    pool: &PromptPool,
    step: usize,
) -> Result<StepRecord, TrainError> {
    let prompts = pool.batch(step, cfg.prompts_per_step);
    let batch = match &cfg.sampler {
        Sampler::TreeRl { search, scheme } => treerl_batch(policy, &prompts, search, scheme, cfg.seed, step)?,
        Sampler::ChainRl { k, variant, gen } => chainrl_batch(policy, &prompts, *k, *variant, gen, cfg.seed, step)?,
    };
    if let Some(a) = batch.examples.iter().flat_map(|e| &e.per_token_advantage).find(|a| !a.is_finite()) {
        return Err(TrainError::NonFinite { step, what: format!("advantage {a}") });
    }
    let stats = policy.apply_policy_gradient(&batch.examples, cfg.effective_lr(), cfg.kl_beta, cfg.length_normalize)?;
    if !stats.grad_norm.is_finite() || !stats.mean_kl.is_finite() {
        return Err(TrainError::NonFinite { step, what: "gradient".into() });
    }
    Ok(StepRecord {
        step,
        mean_reward: if batch.reward_count > 0 { batch.reward_sum / batch.reward_count as f64 } else { 0.0 },
        sequences: batch.examples.len(),
        step_tokens: batch.tokens,
        cumulative_tokens: 0,
        grad_norm: stats.grad_norm,
        mean_kl: stats.mean_kl,
        skipped_prompts: batch.skipped,
        eval: None,
    })
}

/// Run `cfg.steps` steps from scratch.
pub fn train(policy: &mut SynthPolicy, cfg: &TrainConfig) -> Result<TrainHistory, TrainError> {
    train_with(policy, cfg, TrainHistory::default(), &mut ())
}

/// Continue from `history` (empty for a fresh run) until `cfg.steps` records exist.
pub fn train_with(
    policy: &mut SynthPolicy,
    cfg: &TrainConfig,
    mut history: TrainHistory,
    observer: &mut dyn TrainObserver,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    let pool = PromptPool::new(*policy.task(), cfg.seed, cfg.eval_seed, cfg.eval_prompts);
    let gen = cfg.sampler.gen().with_seed(hash_words(cfg.seed, &[STREAM_EVAL]));
    if history.records.is_empty() {
        history.initial = evaluate(policy, pool.heldout(), cfg.eval_passrate_samples, &gen);
    }
    for step in history.records.len()..cfg.steps {
        let mut rec = train_step(policy, cfg, &pool, step)?;
        rec.cumulative_tokens = history.cumulative_tokens() + rec.step_tokens;
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            rec.eval = Some(evaluate(policy, pool.heldout(), cfg.eval_passrate_samples, &gen));
        }
        history.records.push(rec);
        observer.on_step(policy, &history);
    }
    Ok(history)
}
