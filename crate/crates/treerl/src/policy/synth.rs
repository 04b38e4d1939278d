//! ChainSum task and the tabular softmax policy that solves it.
//!
//! The prompt is `a1 + a2 + ... + ak =` over digits mod `V`. A well-behaved
//! response writes the running partial sums and then EOS; the answer is the
//! token right before EOS.
//!
//! The policy conditions on the last `order` tokens plus an operand slot: the
//! operand the next partial sum should add (`a_{j+1}` at generated index `j`),
//! or a NONE marker once every operand has been consumed. Rows of logits are
//! keyed by a [`crate::mix`] hash of that context and are materialized lazily;
//! an untouched row equals the frozen initialization, which doubles as the
//! reference policy for the KL term.

use super::sampling::{argmax, entropy, log_softmax, sample_index, softmax};
use super::{BackendError, Continuation, FinishReason, GenParams, GradeError, Grader, PolicyBackend};
use crate::credit::TrainingExample;
use crate::gentree::{Prompt, TokenId, TokenRecord};
use crate::mix::{hash_words, unit_f64};
use crate::textfmt::{format_f64, parse_f64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use thiserror::Error;

const CTX_SALT: u64 = 0x7C3E_51A0_D2B4_9F61;
const PAD: u64 = u64::MAX;
const SNAPSHOT_MAGIC: &str = "treerl-synth-policy";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChainSum {
    pub modulus: u32,
    pub k: usize,
}

impl ChainSum {
    pub fn new(modulus: u32, k: usize) -> Result<Self, BackendError> {
        if modulus < 4 {
            return Err(BackendError::InvalidParams(format!("modulus {modulus} must be at least 4")));
        }
        if k == 0 {
            return Err(BackendError::InvalidParams("k must be positive".into()));
        }
        Ok(Self { modulus, k })
    }

    pub fn vocab_size(&self) -> usize {
        self.modulus as usize + 3
    }

    pub fn plus(&self) -> TokenId {
        self.modulus
    }

    pub fn eq(&self) -> TokenId {
        self.modulus + 1
    }

    pub fn eos(&self) -> TokenId {
        self.modulus + 2
    }

    /// Slot value meaning "no operand left".
    pub fn none_slot(&self) -> u32 {
        self.modulus
    }

    pub fn is_digit(&self, t: TokenId) -> bool {
        t < self.modulus
    }

    pub fn answer(&self, operands: &[u32]) -> u32 {
        (operands.iter().map(|&a| a as u64).sum::<u64>() % self.modulus as u64) as u32
    }

    pub fn token_text(&self, t: TokenId) -> String {
        match t {
            t if t < self.modulus => t.to_string(),
            t if t == self.plus() => "+".into(),
            t if t == self.eq() => "=".into(),
            t if t == self.eos() => "<eos>".into(),
            t => format!("<{t}>"),
        }
    }

    pub fn encode(&self, id: impl Into<String>, operands: &[u32]) -> Prompt {
        let mut tokens = Vec::with_capacity(2 * operands.len());
        for (i, &a) in operands.iter().enumerate() {
            if i > 0 {
                tokens.push(self.plus());
            }
            tokens.push(a % self.modulus);
        }
        tokens.push(self.eq());
        let text = tokens.iter().map(|&t| self.token_text(t)).collect::<Vec<_>>().join(" ");
        Prompt { id: id.into(), tokens, text }
    }

    /// The `index`-th prompt of the stream identified by `seed`.
    pub fn prompt(&self, seed: u64, index: u64) -> Prompt {
        let ops: Vec<u32> = (0..self.k as u64)
            .map(|j| (hash_words(seed, &[index, j]) % self.modulus as u64) as u32)
            .collect();
        self.encode(format!("cs-{seed:x}-{index}"), &ops)
    }

    pub fn operands(&self, prompt: &Prompt) -> Result<Vec<u32>, GradeError> {
        let t = &prompt.tokens;
        let bad = |m: &str| GradeError::BadPrompt(format!("{}: {m}", prompt.id));
        if t.len() < 2 || t.len() % 2 != 0 || *t.last().unwrap() != self.eq() {
            return Err(bad("not of the form a1 + ... + ak ="));
        }
        let mut ops = Vec::with_capacity(t.len() / 2);
        for (i, &tok) in t[..t.len() - 1].iter().enumerate() {
            if i % 2 == 0 {
                if !self.is_digit(tok) {
                    return Err(bad("operand is not a digit"));
                }
                ops.push(tok);
            } else if tok != self.plus() {
                return Err(bad("missing '+'"));
            }
        }
        Ok(ops)
    }

    pub fn grade_tokens(&self, prompt: &Prompt, response: &[TokenId]) -> Result<bool, GradeError> {
        let vocab = self.vocab_size();
        if let Some(&bad) = response.iter().find(|&&t| t as usize >= vocab) {
            return Err(GradeError::Vocab { token: bad, vocab });
        }
        if response.last() != Some(&self.eos()) {
            return Err(GradeError::NotTerminal);
        }
        let ops = self.operands(prompt)?;
        Ok(response.len() >= 2 && response[response.len() - 2] == self.answer(&ops))
    }
}

impl Grader for ChainSum {
    fn grade(&self, prompt: &Prompt, response: &[TokenRecord]) -> Result<bool, GradeError> {
        let ids: Vec<TokenId> = response.iter().map(|t| t.token_id).collect();
        self.grade_tokens(prompt, &ids)
    }
}

/// Initialization of every logits row; also the frozen reference policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthInit {
    pub noise_scale: f64,
    /// Added to the logit of the step's correct token.
    pub correct_bias: f64,
    /// Subtracted from EOS while operands remain.
    pub eos_penalty: f64,
    /// Subtracted from `+` and `=`.
    pub operator_penalty: f64,
    pub seed: u64,
}

impl Default for SynthInit {
    fn default() -> Self {
        Self { noise_scale: 1.0, correct_bias: 2.0, eos_penalty: 6.0, operator_penalty: 4.0, seed: 0 }
    }
}

impl SynthInit {
    pub fn uniform() -> Self {
        Self { noise_scale: 0.0, correct_bias: 0.0, eos_penalty: 0.0, operator_penalty: 0.0, seed: 0 }
    }
}

/// Policy context: hashed key plus the two features the initialization reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ctx {
    pub key: u64,
    pub prev: u32,
    pub slot: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub mean_kl: f64,
    pub tokens: usize,
    pub examples: usize,
    pub rows_touched: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UpdateError {
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid update parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPolicy {
    task: ChainSum,
    order: usize,
    init: SynthInit,
    rows: HashMap<u64, Vec<f64>>,
}

impl SynthPolicy {
    pub fn new(task: ChainSum, order: usize, init: SynthInit) -> Self {
        Self { task, order, init, rows: HashMap::new() }
    }

    pub fn task(&self) -> &ChainSum {
        &self.task
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn init(&self) -> &SynthInit {
        &self.init
    }

    pub fn vocab_size(&self) -> usize {
        self.task.vocab_size()
    }

    /// Number of rows that differ from their initialization.
    pub fn trained_rows(&self) -> usize {
        self.rows.len()
    }

    /// Context for predicting the token after `history`, where the last
    /// `generated` entries of `history` are response tokens.
    pub fn context(&self, history: &[TokenId], generated: usize, operands: &[u32]) -> Ctx {
        let slot = operands.get(generated).copied().unwrap_or(self.task.none_slot());
        let mut h = hash_words(CTX_SALT, &[self.order as u64, slot as u64]);
        for i in 0..self.order {
            let w = history.len().checked_sub(self.order - i).map_or(PAD, |j| history[j] as u64);
            h = crate::mix::fold(h, w);
        }
        let prev = history.last().copied().unwrap_or(u32::MAX);
        Ctx { key: h, prev, slot }
    }

    fn target(&self, ctx: &Ctx) -> TokenId {
        if ctx.slot == self.task.none_slot() {
            self.task.eos()
        } else if self.task.is_digit(ctx.prev) {
            (ctx.prev + ctx.slot) % self.task.modulus
        } else {
            ctx.slot
        }
    }

    /// Frozen initialization of a row; the reference policy.
    pub fn reference_row(&self, ctx: &Ctx) -> Vec<f64> {
        let n = self.vocab_size();
        let target = self.target(ctx) as usize;
        let mut row: Vec<f64> = (0..n as u64)
            .map(|i| {
                if self.init.noise_scale == 0.0 {
                    return 0.0;
                }
                let u1 = 1.0 - unit_f64(hash_words(self.init.seed, &[ctx.key, i, 0]));
                let u2 = unit_f64(hash_words(self.init.seed, &[ctx.key, i, 1]));
                self.init.noise_scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        row[target] += self.init.correct_bias;
        row[self.task.plus() as usize] -= self.init.operator_penalty;
        row[self.task.eq() as usize] -= self.init.operator_penalty;
        if ctx.slot != self.task.none_slot() {
            row[self.task.eos() as usize] -= self.init.eos_penalty;
        }
        row
    }

    pub fn logits(&self, ctx: &Ctx) -> Vec<f64> {
        match self.rows.get(&ctx.key) {
            Some(r) => r.clone(),
            None => self.reference_row(ctx),
        }
    }

    /// Overwrite one row; used to build degenerate test policies.
    pub fn set_row(&mut self, key: u64, logits: Vec<f64>) {
        assert_eq!(logits.len(), self.vocab_size());
        self.rows.insert(key, logits);
    }

    fn check_tokens(&self, tokens: impl IntoIterator<Item = TokenId>) -> Result<(), BackendError> {
        let vocab = self.vocab_size();
        match tokens.into_iter().find(|&t| t as usize >= vocab) {
            Some(token) => Err(BackendError::Vocab { token, vocab }),
            None => Ok(()),
        }
    }

    fn prepare(&self, prompt: &Prompt, prefix: &[TokenRecord]) -> Result<(Vec<u32>, Vec<TokenId>), BackendError> {
        self.check_tokens(prompt.tokens.iter().copied())?;
        self.check_tokens(prefix.iter().map(|t| t.token_id))?;
        let ops = self.task.operands(prompt).map_err(|e| BackendError::Other(e.to_string()))?;
        let mut history = prompt.tokens.clone();
        history.extend(prefix.iter().map(|t| t.token_id));
        Ok((ops, history))
    }

    fn decode<F>(
        &self,
        prompt: &Prompt,
        prefix: &[TokenRecord],
        max_total: usize,
        mut choose: F,
    ) -> Result<Continuation, BackendError>
    where
        F: FnMut(&[f64]) -> usize,
    {
        let (ops, mut history) = self.prepare(prompt, prefix)?;
        let budget = max_total.saturating_sub(prefix.len()).max(1);
        let eos = self.task.eos() as usize;
        let mut tokens = Vec::new();
        for _ in 0..budget {
            let ctx = self.context(&history, history.len() - prompt.tokens.len(), &ops);
            let logits = self.logits(&ctx);
            let idx = choose(&logits);
            let lp = log_softmax(&logits)[idx];
            tokens.push(TokenRecord {
                token_id: idx as TokenId,
                surprisal: (-lp).max(0.0),
                text: None,
                entropy: Some(entropy(&logits)),
            });
            history.push(idx as TokenId);
            if idx == eos {
                return Ok(Continuation { tokens, terminal: true, finish_reason: FinishReason::EndToken });
            }
        }
        Ok(Continuation { tokens, terminal: true, finish_reason: FinishReason::Length })
    }

    /// Argmax decoding of the untempered policy.
    pub fn greedy(&self, prompt: &Prompt, max_total: usize) -> Result<Continuation, BackendError> {
        self.decode(prompt, &[], max_total, argmax)
    }

    pub fn greedy_correct(&self, prompt: &Prompt, max_total: usize) -> Result<bool, BackendError> {
        let c = self.greedy(prompt, max_total)?;
        let ids: Vec<TokenId> = c.tokens.iter().map(|t| t.token_id).collect();
        Ok(self.task.grade_tokens(prompt, &ids).unwrap_or(false))
    }

    /// One ascent step on the batch-mean surrogate
    /// `A·log π(t|ctx) − kl_beta·KL(π(·|ctx) ‖ π_ref(·|ctx))`, summed over tokens,
    /// or averaged over each sequence's tokens when `length_normalize` is set.
    /// Rows whose gradient is exactly zero are left untouched.
    pub fn apply_policy_gradient(
        &mut self,
        batch: &[TrainingExample],
        lr: f64,
        kl_beta: f64,
        length_normalize: bool,
    ) -> Result<UpdateStats, UpdateError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(UpdateError::InvalidParams(format!("lr {lr} must be positive")));
        }
        if !(kl_beta >= 0.0 && kl_beta.is_finite()) {
            return Err(UpdateError::InvalidParams(format!("kl_beta {kl_beta} must be non-negative")));
        }
        if batch.is_empty() {
            return Ok(UpdateStats::default());
        }
        let vocab = self.vocab_size();
        let mut ctxs: HashMap<u64, Ctx> = HashMap::new();
        let mut events = Vec::new();
        for ex in batch {
            if ex.tokens.len() != ex.per_token_advantage.len() {
                return Err(UpdateError::InvalidBatch(format!("leaf {}: advantage length mismatch", ex.leaf_id)));
            }
            let prompt = Prompt { id: ex.prompt_id.clone(), tokens: ex.prompt_tokens.clone(), text: String::new() };
            let ops = self.task.operands(&prompt).map_err(|e| UpdateError::InvalidBatch(e.to_string()))?;
            let mut history = ex.prompt_tokens.clone();
            let weight = if length_normalize && !ex.tokens.is_empty() { 1.0 / ex.tokens.len() as f64 } else { 1.0 };
            for (j, (tok, &adv)) in ex.tokens.iter().zip(&ex.per_token_advantage).enumerate() {
                if !adv.is_finite() {
                    return Err(UpdateError::InvalidBatch(format!("non-finite advantage {adv} in leaf {}", ex.leaf_id)));
                }
                if tok.token_id as usize >= vocab {
                    return Err(UpdateError::InvalidBatch(format!("token {} outside vocabulary", tok.token_id)));
                }
                let ctx = self.context(&history, j, &ops);
                ctxs.insert(ctx.key, ctx);
                events.push(GradEvent { key: ctx.key, token: tok.token_id as usize, advantage: adv, weight });
                history.push(tok.token_id);
            }
        }
        let scale = 1.0 / batch.len() as f64;
        let theta = |k: &u64| self.logits(&ctxs[k]);
        let reference = |k: &u64| self.reference_row(&ctxs[k]);
        let grad = surrogate_gradient(&events, theta, reference, kl_beta, scale);
        let mean_kl = mean_kl(&events, theta, reference);
        let mut sq = 0.0;
        let mut touched = 0;
        for (key, g) in &grad {
            sq += g.iter().map(|x| x * x).sum::<f64>();
            if g.iter().any(|&x| x != 0.0) {
                let mut row = self.logits(&ctxs[key]);
                for (r, gi) in row.iter_mut().zip(g) {
                    *r += lr * gi;
                }
                self.rows.insert(*key, row);
                touched += 1;
            }
        }
        Ok(UpdateStats {
            grad_norm: sq.sqrt(),
            mean_kl,
            tokens: events.len(),
            examples: batch.len(),
            rows_touched: touched,
        })
    }

    /// Write the policy as a versioned text table.
    pub fn write_snapshot<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}")?;
        writeln!(out, "modulus {}", self.task.modulus)?;
        writeln!(out, "k {}", self.task.k)?;
        writeln!(out, "order {}", self.order)?;
        writeln!(out, "noise_scale {}", format_f64(self.init.noise_scale))?;
        writeln!(out, "correct_bias {}", format_f64(self.init.correct_bias))?;
        writeln!(out, "eos_penalty {}", format_f64(self.init.eos_penalty))?;
        writeln!(out, "operator_penalty {}", format_f64(self.init.operator_penalty))?;
        writeln!(out, "init_seed {}", self.init.seed)?;
        writeln!(out, "rows {}", self.rows.len())?;
        let mut keys: Vec<&u64> = self.rows.keys().collect();
        keys.sort();
        for key in keys {
            write!(out, "{key:016x}")?;
            for v in &self.rows[key] {
                write!(out, " {}", format_f64(*v))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: std::io::BufRead>(input: R) -> Result<Self, SnapshotError> {
        let mut lines = input.lines().enumerate();
        // Lines starting with '#' are comments.
        let mut next = |what: &str| -> Result<(usize, String), SnapshotError> {
            loop {
                match lines.next() {
                    Some((i, l)) => {
                        let l = l?;
                        if !l.starts_with('#') {
                            return Ok((i + 1, l));
                        }
                    }
                    None => return Err(SnapshotError::Parse { line: 0, message: format!("missing {what}") }),
                }
            }
        };
        let perr = |line: usize, message: String| SnapshotError::Parse { line, message };
        let (ln, head) = next("header")?;
        if head != format!("{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}") {
            return Err(perr(ln, format!("unsupported snapshot header {head:?}")));
        }
        let mut field = |name: &str| -> Result<(usize, String), SnapshotError> {
            let (ln, l) = next(name)?;
            match l.split_once(' ') {
                Some((k, v)) if k == name => Ok((ln, v.to_string())),
                _ => Err(perr(ln, format!("expected field {name}"))),
            }
        };
        let int = |(ln, v): (usize, String)| v.parse::<u64>().map_err(|e| perr(ln, e.to_string()));
        let float = |(ln, v): (usize, String)| parse_f64(&v).map_err(|e| perr(ln, e));
        let modulus = int(field("modulus")?)? as u32;
        let k = int(field("k")?)? as usize;
        let order = int(field("order")?)? as usize;
        let init = SynthInit {
            noise_scale: float(field("noise_scale")?)?,
            correct_bias: float(field("correct_bias")?)?,
            eos_penalty: float(field("eos_penalty")?)?,
            operator_penalty: float(field("operator_penalty")?)?,
            seed: int(field("init_seed")?)?,
        };
        let count = int(field("rows")?)? as usize;
        let task = ChainSum::new(modulus, k).map_err(|e| perr(2, e.to_string()))?;
        let mut policy = SynthPolicy::new(task, order, init);
        for _ in 0..count {
            let (ln, l) = next("row")?;
            let mut parts = l.split(' ');
            let key = u64::from_str_radix(parts.next().unwrap_or(""), 16).map_err(|e| perr(ln, e.to_string()))?;
            let row = parts.map(|p| parse_f64(p).map_err(|e| perr(ln, e))).collect::<Result<Vec<_>, _>>()?;
            if row.len() != policy.vocab_size() {
                return Err(perr(ln, format!("row has {} entries, expected {}", row.len(), policy.vocab_size())));
            }
            policy.rows.insert(key, row);
        }
        Ok(policy)
    }
}

impl PolicyBackend for SynthPolicy {
    fn sample_continuation(
        &self,
        prompt: &Prompt,
        prefix: &[TokenRecord],
        params: &GenParams,
    ) -> Result<Continuation, BackendError> {
        params.validate()?;
        let mut words = Vec::with_capacity(prompt.tokens.len() + prefix.len() + 1);
        words.push(prompt.tokens.len() as u64);
        words.extend(prompt.tokens.iter().map(|&t| t as u64));
        words.extend(prefix.iter().map(|t| t.token_id as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(hash_words(params.seed, &words));
        self.decode(prompt, prefix, params.max_new_tokens, |logits| {
            sample_index(logits, params.temperature, params.top_p, &mut rng)
        })
    }
}

/// One token occurrence in the surrogate objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradEvent<K> {
    pub key: K,
    pub token: usize,
    pub advantage: f64,
    /// Multiplies both the advantage and the KL term of this event.
    pub weight: f64,
}

fn kl(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter().zip(logq).map(|(&a, &b)| a.exp() * (a - b)).sum()
}

/// `scale · Σ_events w·[A·log π(t|key) − kl_beta·KL(π(·|key) ‖ ref(·|key))]`.
pub fn surrogate_objective<K, F, G>(events: &[GradEvent<K>], theta: F, reference: G, kl_beta: f64, scale: f64) -> f64
where
    F: Fn(&K) -> Vec<f64>,
    G: Fn(&K) -> Vec<f64>,
{
    events
        .iter()
        .map(|e| {
            let lp = log_softmax(&theta(&e.key));
            let lq = log_softmax(&reference(&e.key));
            e.weight * (e.advantage * lp[e.token] - kl_beta * kl(&lp, &lq))
        })
        .sum::<f64>()
        * scale
}

/// Analytic gradient of [`surrogate_objective`] with respect to each row.
pub fn surrogate_gradient<K, F, G>(
    events: &[GradEvent<K>],
    theta: F,
    reference: G,
    kl_beta: f64,
    scale: f64,
) -> BTreeMap<K, Vec<f64>>
where
    K: Ord + Clone,
    F: Fn(&K) -> Vec<f64>,
    G: Fn(&K) -> Vec<f64>,
{
    let mut groups: BTreeMap<K, Vec<&GradEvent<K>>> = BTreeMap::new();
    for e in events {
        if e.weight != 0.0 && (e.advantage != 0.0 || kl_beta != 0.0) {
            groups.entry(e.key.clone()).or_default().push(e);
        }
    }
    groups
        .into_iter()
        .map(|(key, evs)| {
            let z = theta(&key);
            let p = softmax(&z);
            let mut g = vec![0.0; z.len()];
            let adv_sum: f64 = evs.iter().map(|e| e.weight * e.advantage).sum();
            for e in &evs {
                g[e.token] += e.weight * e.advantage;
            }
            for (gi, pi) in g.iter_mut().zip(&p) {
                *gi -= adv_sum * pi;
            }
            if kl_beta != 0.0 {
                let lp = log_softmax(&z);
                let lq = log_softmax(&reference(&key));
                let d = kl(&lp, &lq);
                let w = kl_beta * evs.iter().map(|e| e.weight).sum::<f64>();
                for i in 0..z.len() {
                    g[i] -= w * p[i] * (lp[i] - lq[i] - d);
                }
            }
            for gi in &mut g {
                *gi *= scale;
            }
            (key, g)
        })
        .collect()
}

fn mean_kl<K: Eq + Hash + Clone, F, G>(events: &[GradEvent<K>], theta: F, reference: G) -> f64
where
    F: Fn(&K) -> Vec<f64>,
    G: Fn(&K) -> Vec<f64>,
{
    if events.is_empty() {
        return 0.0;
    }
    let mut cache: HashMap<K, f64> = HashMap::new();
    let mut total = 0.0;
    for e in events {
        let v = *cache.entry(e.key.clone()).or_insert_with(|| {
            kl(&log_softmax(&theta(&e.key)), &log_softmax(&reference(&e.key)))
        });
        total += v;
    }
    total / events.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gentree::NodeId;

    fn task() -> ChainSum {
        ChainSum::new(10, 4).unwrap()
    }

    fn example(prompt: &Prompt, tokens: &[u32], adv: f64) -> TrainingExample {
        TrainingExample {
            prompt_id: prompt.id.clone(),
            prompt_tokens: prompt.tokens.clone(),
            tokens: tokens.iter().map(|&t| TokenRecord::new(t, 0.0)).collect(),
            per_token_advantage: vec![adv; tokens.len()],
            leaf_id: NodeId(0),
        }
    }

    #[test]
    fn grading_examples() {
        let t = ChainSum::new(10, 2).unwrap();
        let p = t.encode("a", &[3, 4]);
        assert_eq!(t.grade_tokens(&p, &[3, 7, t.eos()]), Ok(true));
        let p = t.encode("b", &[7, 8]);
        assert_eq!(t.grade_tokens(&p, &[5, t.eos()]), Ok(true));
        assert_eq!(t.grade_tokens(&p, &[5]), Err(GradeError::NotTerminal));
        assert!(matches!(t.grade_tokens(&p, &[15, t.eos()]), Err(GradeError::Vocab { .. })));
        assert_eq!(t.grade_tokens(&p, &[t.eos()]), Ok(false));
    }

    #[test]
    fn prompt_round_trip() {
        let t = task();
        let p = t.prompt(9, 3);
        let ops = t.operands(&p).unwrap();
        assert_eq!(ops.len(), 4);
        assert_eq!(t.encode(p.id.clone(), &ops), p);
    }

    #[test]
    fn sampling_is_deterministic() {
        let pol = SynthPolicy::new(task(), 2, SynthInit::default());
        let p = task().prompt(1, 0);
        let g = GenParams::synthetic().with_seed(5);
        assert_eq!(pol.sample_continuation(&p, &[], &g).unwrap(), pol.sample_continuation(&p, &[], &g).unwrap());
    }

    #[test]
    fn uniform_policy_surprisal_is_log_vocab() {
        let t = ChainSum::new(5, 3).unwrap();
        let pol = SynthPolicy::new(t, 2, SynthInit::uniform());
        let g = GenParams { temperature: 1.0, top_p: 1.0, max_new_tokens: 32, seed: 2 };
        let c = pol.sample_continuation(&t.prompt(0, 0), &[], &g).unwrap();
        for tok in &c.tokens {
            assert!((tok.surprisal - 8f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_row_gives_zero_surprisal() {
        let t = task();
        let mut pol = SynthPolicy::new(t, 2, SynthInit::uniform());
        let p = t.prompt(0, 0);
        let ops = t.operands(&p).unwrap();
        let ctx = pol.context(&p.tokens, 0, &ops);
        let mut row = vec![-1e3; t.vocab_size()];
        row[6] = 0.0;
        pol.set_row(ctx.key, row);
        let c = pol.sample_continuation(&p, &[], &GenParams::synthetic()).unwrap();
        assert_eq!(c.tokens[0].token_id, 6);
        assert!(c.tokens[0].surprisal.abs() < 1e-12);
    }

    #[test]
    fn zero_advantage_without_kl_is_a_no_op() {
        let t = task();
        let mut pol = SynthPolicy::new(t, 2, SynthInit::default());
        let before = pol.clone();
        let p = t.prompt(0, 1);
        let stats = pol.apply_policy_gradient(&[example(&p, &[1, 2, t.eos()], 0.0)], 0.5, 0.0, false).unwrap();
        assert_eq!(pol, before);
        assert_eq!(stats.grad_norm, 0.0);
    }

    #[test]
    fn positive_advantage_raises_probability() {
        let t = task();
        let mut pol = SynthPolicy::new(t, 2, SynthInit::default());
        let p = t.prompt(0, 1);
        let ops = t.operands(&p).unwrap();
        let ctx = pol.context(&p.tokens, 0, &ops);
        let before = softmax(&pol.logits(&ctx))[4];
        pol.apply_policy_gradient(&[example(&p, &[4], 1.0)], 0.5, 1e-4, false).unwrap();
        assert!(softmax(&pol.logits(&ctx))[4] > before);
    }

    #[test]
    fn non_finite_advantage_rejected() {
        let t = task();
        let mut pol = SynthPolicy::new(t, 2, SynthInit::default());
        let p = t.prompt(0, 1);
        let r = pol.apply_policy_gradient(&[example(&p, &[4], f64::NAN)], 0.5, 0.0, false);
        assert!(matches!(r, Err(UpdateError::InvalidBatch(_))));
    }

    #[test]
    fn snapshot_round_trip() {
        let t = task();
        let mut pol = SynthPolicy::new(t, 2, SynthInit { seed: 4, ..SynthInit::default() });
        let p = t.prompt(0, 1);
        pol.apply_policy_gradient(&[example(&p, &[4, 1, 3], 0.7)], 0.3, 1e-3, false).unwrap();
        let mut buf = Vec::new();
        pol.write_snapshot(&mut buf).unwrap();
        let back = SynthPolicy::read_snapshot(&buf[..]).unwrap();
        assert_eq!(back, pol);
    }
}
