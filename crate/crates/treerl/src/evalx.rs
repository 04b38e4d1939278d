//! Metrics and experiment harness.

use crate::gentree::{NodeId, Prompt, TokenId};
use crate::mix::hash_words;
use crate::policy::{GenParams, Grader, PolicyBackend};
use crate::search::{eptree_search, BudgetReport, ForkEvent, ForkStrategy, SearchConfig, SearchError};
use crate::textfmt::format_f64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("prompt {0} has no responses")]
    NoResponses(usize),
    #[error("no fork events to histogram")]
    EmptyHistogram,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Search(#[from] SearchError),
}

/// Fraction of prompts with at least one correct response.
pub fn passrate(per_prompt: &[Vec<bool>]) -> Result<f64, EvalError> {
    if per_prompt.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut hit = 0;
    for (i, r) in per_prompt.iter().enumerate() {
        if r.is_empty() {
            return Err(EvalError::NoResponses(i));
        }
        if r.iter().any(|&c| c) {
            hit += 1;
        }
    }
    Ok(hit as f64 / per_prompt.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
    pub total: usize,
    /// Pearson statistic against the uniform distribution over the bins.
    pub chi_square: f64,
    pub dof: usize,
    pub p_value: f64,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn edges(&self, i: usize) -> (f64, f64) {
        let b = self.counts.len() as f64;
        (i as f64 / b, (i + 1) as f64 / b)
    }
}

/// Bin relative positions in `[0, 1]` (1.0 falls in the last bin) and test
/// them for uniformity.
pub fn position_histogram(positions: &[f64], bins: usize) -> Result<Histogram, EvalError> {
    if bins == 0 {
        return Err(EvalError::InvalidArgument("bins must be positive".into()));
    }
    if positions.is_empty() {
        return Err(EvalError::EmptyHistogram);
    }
    let mut counts = vec![0usize; bins];
    for &p in positions {
        if !(0.0..=1.0).contains(&p) {
            return Err(EvalError::InvalidArgument(format!("relative position {p} outside [0, 1]")));
        }
        counts[((p * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let total = positions.len();
    let expected = total as f64 / bins as f64;
    let chi_square = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dof = bins.saturating_sub(1);
    let p_value = if dof == 0 {
        1.0
    } else {
        1.0 - ChiSquared::new(dof as f64).expect("positive dof").cdf(chi_square)
    };
    Ok(Histogram { counts, total, chi_square, dof, p_value })
}

pub fn fork_position_histogram(events: &[ForkEvent], bins: usize) -> Result<Histogram, EvalError> {
    let pos: Vec<f64> = events.iter().map(|e| e.relative_position).collect();
    position_histogram(&pos, bins)
}

/// Token ids ranked by count, ties by ascending id; `top_k = 0` keeps all.
pub fn token_frequency(tokens: &[TokenId], top_k: usize) -> Vec<(TokenId, usize)> {
    let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut out: Vec<(TokenId, usize)> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    if top_k > 0 {
        out.truncate(top_k);
    }
    out
}

pub fn fork_token_frequency(events: &[ForkEvent], top_k: usize) -> Vec<(TokenId, usize)> {
    let toks: Vec<TokenId> = events.iter().map(|e| e.token_id).collect();
    token_frequency(&toks, top_k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEval {
    pub prompt_id: String,
    pub correct: Vec<bool>,
    pub report: BudgetReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub prompts: Vec<PromptEval>,
    pub passrate: f64,
    pub mean_tokens: f64,
    pub mean_leaves: f64,
    pub leaves_per_token: f64,
    #[serde(skip)]
    pub fork_events: Vec<ForkEvent>,
}

impl EvalRecord {
    pub fn from_prompts(dataset: impl Into<String>, prompts: Vec<PromptEval>, fork_events: Vec<ForkEvent>) -> Result<Self, EvalError> {
        let correct: Vec<Vec<bool>> = prompts.iter().map(|p| p.correct.clone()).collect();
        let pr = passrate(&correct)?;
        let n = prompts.len() as f64;
        let tokens: usize = prompts.iter().map(|p| p.report.generated_tokens).sum();
        let leaves: usize = prompts.iter().map(|p| p.report.leaves).sum();
        Ok(Self {
            dataset: dataset.into(),
            passrate: pr,
            mean_tokens: tokens as f64 / n,
            mean_leaves: leaves as f64 / n,
            leaves_per_token: if tokens > 0 { leaves as f64 / tokens as f64 } else { 0.0 },
            prompts,
            fork_events,
        })
    }
}

/// Per-prompt seed so every configuration sees the same sampling streams.
pub fn prompt_seed(seed: u64, index: usize) -> u64 {
    hash_words(seed, &[0x4556_414C_5850, index as u64])
}

/// Run one search configuration over a prompt set.
pub fn evaluate_search(
    backend: &dyn PolicyBackend,
    grader: &dyn Grader,
    prompts: &[Prompt],
    cfg: &SearchConfig,
    seed: u64,
    dataset: &str,
) -> Result<EvalRecord, EvalError> {
    if prompts.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let outs = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut c = cfg.clone();
            c.gen.seed = prompt_seed(seed, i);
            eptree_search(backend, grader, p, &c).map(|o| (p.id.clone(), o))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut events = Vec::new();
    let mut rows = Vec::with_capacity(outs.len());
    for (id, o) in outs {
        let correct = o.forest.leaves().into_iter().map(|l| leaf_correct(&o.forest, l)).collect();
        events.extend(o.fork_events);
        rows.push(PromptEval { prompt_id: id, correct, report: o.report });
    }
    EvalRecord::from_prompts(dataset, rows, events)
}

fn leaf_correct(f: &crate::gentree::GenForest, l: NodeId) -> bool {
    f.node(l).ok().and_then(|n| n.correct) == Some(true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub n: usize,
    pub l: usize,
    pub t: usize,
    pub expected_leaves: usize,
    /// Mean leaves per prompt.
    pub leaves: f64,
    pub passrate: f64,
    /// Mean generated tokens per prompt.
    pub tokens: f64,
    pub shortfall: usize,
    pub error: Option<String>,
}

pub fn sweep(
    backend: &dyn PolicyBackend,
    grader: &dyn Grader,
    prompts: &[Prompt],
    configs: &[SearchConfig],
    seed: u64,
) -> Result<Vec<SweepRow>, EvalError> {
    if configs.is_empty() {
        return Err(EvalError::InvalidArgument("sweep needs at least one config".into()));
    }
    Ok(configs
        .iter()
        .map(|cfg| {
            let base = SweepRow {
                m: cfg.m,
                n: cfg.n,
                l: cfg.l,
                t: cfg.t,
                expected_leaves: cfg.expected_leaves(),
                leaves: 0.0,
                passrate: 0.0,
                tokens: 0.0,
                shortfall: 0,
                error: None,
            };
            match evaluate_search(backend, grader, prompts, cfg, seed, "sweep") {
                Ok(r) => SweepRow {
                    leaves: r.mean_leaves,
                    passrate: r.passrate,
                    tokens: r.mean_tokens,
                    shortfall: r.prompts.iter().map(|p| p.report.shortfall).sum(),
                    ..base
                },
                Err(e) => SweepRow { error: Some(e.to_string()), ..base },
            }
        })
        .collect())
}

/// The same configuration and seeds under entropy and random forking.
pub fn ablation_fork_strategy(
    backend: &dyn PolicyBackend,
    grader: &dyn Grader,
    prompts: &[Prompt],
    cfg: &SearchConfig,
    seed: u64,
) -> Result<(EvalRecord, EvalRecord), EvalError> {
    if !cfg.expands() {
        return Err(EvalError::InvalidArgument("ablation needs N*L*T > 0".into()));
    }
    let with = |s: ForkStrategy| SearchConfig { fork_strategy: s, ..cfg.clone() };
    let e = evaluate_search(backend, grader, prompts, &with(ForkStrategy::Entropy), seed, "entropy")?;
    let r = evaluate_search(backend, grader, prompts, &with(ForkStrategy::Random), seed, "random")?;
    Ok((e, r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedMultichain {
    pub target_tokens: f64,
    pub k_low: usize,
    pub k_high: usize,
    pub tokens_low: f64,
    pub tokens_high: f64,
    /// PassRate linearly interpolated to `target_tokens`.
    pub passrate: f64,
    pub leaves: f64,
}

/// Multi-chain PassRate at a per-prompt token budget, interpolated between
/// the two nested chain counts whose mean token use brackets the target.
pub fn matched_multichain(
    backend: &dyn PolicyBackend,
    grader: &dyn Grader,
    prompts: &[Prompt],
    target_tokens: f64,
    gen: &GenParams,
    seed: u64,
    k_max: usize,
) -> Result<MatchedMultichain, EvalError> {
    if prompts.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let rec = evaluate_search(backend, grader, prompts, &SearchConfig { gen: gen.clone(), ..SearchConfig::mnlt(k_max, 0, 0, 0) }, seed, "multichain")?;
    // Chains of the k_max run in sampling order; prefixes of length k are nested runs.
    let lens: Vec<Vec<usize>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut c = SearchConfig { gen: gen.clone(), ..SearchConfig::mnlt(k_max, 0, 0, 0) };
            c.gen.seed = prompt_seed(seed, i);
            eptree_search(backend, grader, p, &c).map(|o| o.forest.nodes().iter().map(|n| n.tokens.len()).collect())
        })
        .collect::<Result<_, _>>()?;
    let n = prompts.len() as f64;
    let at = |k: usize| -> (f64, f64) {
        let tokens: usize = lens.iter().map(|l| l[..k].iter().sum::<usize>()).sum();
        let pass = rec.prompts.iter().filter(|p| p.correct[..k].iter().any(|&c| c)).count();
        (tokens as f64 / n, pass as f64 / n)
    };
    let mut k_low = 1;
    while k_low < k_max && at(k_low + 1).0 <= target_tokens {
        k_low += 1;
    }
    let k_high = (k_low + 1).min(k_max);
    let (tl, pl) = at(k_low);
    let (th, ph) = at(k_high);
    let w = if th > tl { ((target_tokens - tl) / (th - tl)).clamp(0.0, 1.0) } else { 0.0 };
    Ok(MatchedMultichain {
        target_tokens,
        k_low,
        k_high,
        tokens_low: tl,
        tokens_high: th,
        passrate: pl + w * (ph - pl),
        leaves: k_low as f64 + w * (k_high - k_low) as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(W >= wins)` for `W ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

impl SignTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// One-sided paired sign test that `a` tends to exceed `b`.
pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => wins += 1,
            Some(std::cmp::Ordering::Less) => losses += 1,
            _ => ties += 1,
        }
    }
    SignTest { wins, losses, ties, p_value: binomial_upper_tail(wins + losses, wins) }
}

fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut log_c = 0.0f64;
    let mut total = 0.0;
    for i in 0..=n {
        if i > 0 {
            log_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= k {
            total += (log_c - n as f64 * std::f64::consts::LN_2).exp();
        }
    }
    total.min(1.0)
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// A CSV table with a provenance comment line:
/// `# treerl table=<kind> schema_version=<v> config_hash=<hash>`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub kind: String,
    pub schema_version: u32,
    pub config_hash: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad provenance line: {0}")]
    Provenance(String),
}

impl CsvTable {
    pub fn new(kind: &str, config_hash: &str, header: &[&str]) -> Self {
        Self {
            kind: kind.into(),
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), CsvError> {
        writeln!(
            out,
            "# treerl table={} schema_version={} config_hash={}",
            self.kind, self.schema_version, self.config_hash
        )?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parse a table. Rows whose field count disagrees with the header are
    /// returned separately as `(line, reason)` instead of failing the read.
    pub fn read<R: BufRead>(mut input: R) -> Result<(Self, Vec<(usize, String)>), CsvError> {
        let mut first = String::new();
        input.read_line(&mut first)?;
        let first = first.trim_end();
        let body = first
            .strip_prefix("# treerl ")
            .ok_or_else(|| CsvError::Provenance(first.to_string()))?;
        let mut kind = None;
        let mut version = None;
        let mut hash = None;
        for kv in body.split_whitespace() {
            match kv.split_once('=') {
                Some(("table", v)) => kind = Some(v.to_string()),
                Some(("schema_version", v)) => version = v.parse().ok(),
                Some(("config_hash", v)) => hash = Some(v.to_string()),
                _ => {}
            }
        }
        let (Some(kind), Some(schema_version), Some(config_hash)) = (kind, version, hash) else {
            return Err(CsvError::Provenance(first.to_string()));
        };
        let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        let mut bad = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 3;
            match rec {
                Ok(rec) if rec.len() == header.len() => rows.push(rec.iter().map(String::from).collect()),
                Ok(rec) => bad.push((line, format!("expected {} fields, found {}", header.len(), rec.len()))),
                Err(e) => bad.push((line, e.to_string())),
            }
        }
        Ok((Self { kind, schema_version, config_hash, header, rows }, bad))
    }
}

pub fn sweep_table(rows: &[SweepRow], config_hash: &str) -> CsvTable {
    let mut t = CsvTable::new(
        "sweep",
        config_hash,
        &["m", "n", "l", "t", "expected_leaves", "leaves", "passrate", "tokens", "shortfall", "error"],
    );
    for r in rows {
        t.push(vec![
            r.m.to_string(),
            r.n.to_string(),
            r.l.to_string(),
            r.t.to_string(),
            r.expected_leaves.to_string(),
            format_f64(r.leaves),
            format_f64(r.passrate),
            format_f64(r.tokens),
            r.shortfall.to_string(),
            r.error.clone().unwrap_or_default(),
        ]);
    }
    t
}

pub fn histogram_table(h: &Histogram, config_hash: &str) -> CsvTable {
    let mut t = CsvTable::new("fork_positions", config_hash, &["bin_low", "bin_high", "count"]);
    for (i, c) in h.counts.iter().enumerate() {
        let (lo, hi) = h.edges(i);
        t.push(vec![format_f64(lo), format_f64(hi), c.to_string()]);
    }
    t
}

pub fn token_table(freq: &[(TokenId, usize)], text: impl Fn(TokenId) -> String, config_hash: &str) -> CsvTable {
    let mut t = CsvTable::new("fork_tokens", config_hash, &["rank", "token_id", "token", "count"]);
    for (i, (tok, c)) in freq.iter().enumerate() {
        t.push(vec![(i + 1).to_string(), tok.to_string(), text(*tok), c.to_string()]);
    }
    t
}
