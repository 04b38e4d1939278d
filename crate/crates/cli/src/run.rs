//! Command implementations. Each writes its artifacts into a fresh run
//! directory named `<command>-<timestamp>-<hash8>`.

use crate::config::{BackendKind, Command, ConfigError, RunConfig, SamplerKind};
use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;
use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use treerl::evalx::{self, CsvTable, EvalRecord, PromptEval, SCHEMA_VERSION};
use treerl::gentree::{self, Prompt, TokenRecord};
use treerl::policy::{ChainSum, GradeError, Grader, HttpBackend, PolicyBackend, SynthPolicy};
use treerl::search::{eptree_search, SearchConfig};
use treerl::textfmt::format_f64;
use treerl::theory;
use treerl::trainer::{self, Sampler, TrainConfig, TrainError, TrainHistory, TrainObserver};

pub struct RunDir {
    pub path: PathBuf,
    pub hash: String,
}

impl RunDir {
    pub fn create(out: &Path, command: Command, cfg: &RunConfig) -> Result<Self> {
        let hash = cfg.hash(command);
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{}-{}-{}", command.name(), stamp, &hash[..8]);
        let mut path = out.join(&base);
        let mut i = 1;
        while path.exists() {
            path = out.join(format!("{base}-{i}"));
            i += 1;
        }
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let dir = Self { path, hash };
        fs::write(dir.file("config.toml"), format!("# config_hash={}\n{}", dir.hash, cfg.to_toml()))?;
        dir.write_json(
            "run.json",
            &json!({
                "command": command,
                "config_hash": dir.hash,
                "schema_version": SCHEMA_VERSION,
                "seed": cfg.seed,
                "started": stamp.to_string(),
            }),
        )?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json(&self, name: &str, v: &serde_json::Value) -> Result<()> {
        let mut f = BufWriter::new(File::create(self.file(name))?);
        serde_json::to_writer_pretty(&mut f, v)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_csv(&self, name: &str, table: &CsvTable) -> Result<()> {
        table.write(BufWriter::new(File::create(self.file(name))?))?;
        Ok(())
    }
}

/// Grades an HTTP response by its last number against a reference answer.
pub struct AnswerGrader {
    answers: HashMap<String, String>,
}

fn last_number(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let mut end = None;
    for i in (0..bytes.len()).rev() {
        if bytes[i].is_ascii_digit() {
            end = Some(i + 1);
            break;
        }
    }
    let end = end?;
    let mut start = end;
    while start > 0 && (bytes[start - 1].is_ascii_digit() || bytes[start - 1] == b'.') {
        start -= 1;
    }
    if start > 0 && bytes[start - 1] == b'-' {
        start -= 1;
    }
    Some(text[start..end].trim_start_matches('.'))
}

impl Grader for AnswerGrader {
    fn grade(&self, prompt: &Prompt, response: &[TokenRecord]) -> Result<bool, GradeError> {
        let answer = self
            .answers
            .get(&prompt.id)
            .ok_or_else(|| GradeError::BadPrompt(format!("no answer for {}", prompt.id)))?;
        let text: String = response.iter().filter_map(|t| t.text.as_deref()).collect();
        Ok(last_number(&text) == Some(answer.trim()))
    }
}

#[derive(Deserialize)]
struct PromptRecord {
    id: String,
    text: String,
    answer: String,
}

pub enum Backend {
    Synthetic(SynthPolicy),
    Http(HttpBackend, AnswerGrader),
}

impl Backend {
    pub fn policy(&self) -> &dyn PolicyBackend {
        match self {
            Backend::Synthetic(p) => p,
            Backend::Http(h, _) => h,
        }
    }

    pub fn grader(&self) -> &dyn Grader {
        match self {
            Backend::Synthetic(p) => p.task(),
            Backend::Http(_, g) => g,
        }
    }

    pub fn token_text(&self, t: u32) -> String {
        match self {
            Backend::Synthetic(p) => p.task().token_text(t),
            Backend::Http(..) => format!("id:{t}"),
        }
    }
}

fn read_snapshot(path: &Path) -> Result<SynthPolicy> {
    let f = File::open(path).with_context(|| format!("opening snapshot {}", path.display()))?;
    SynthPolicy::read_snapshot(BufReader::new(f)).with_context(|| format!("reading snapshot {}", path.display()))
}

pub fn synthetic_policy(cfg: &RunConfig) -> Result<SynthPolicy> {
    let s = &cfg.backend.synthetic;
    match &s.snapshot {
        Some(p) => read_snapshot(p).map_err(|e| ConfigError(format!("{e:#}")).into()),
        None => {
            let task = ChainSum::new(s.modulus, s.k).map_err(|e| ConfigError(e.to_string()))?;
            Ok(SynthPolicy::new(task, s.order, s.init()))
        }
    }
}

pub fn load_backend(cfg: &RunConfig) -> Result<(Backend, Vec<Prompt>)> {
    match cfg.backend.kind {
        BackendKind::Synthetic => {
            let policy = synthetic_policy(cfg)?;
            let task = *policy.task();
            let prompts = (0..cfg.data.prompts as u64).map(|i| task.prompt(cfg.data.prompt_seed, i)).collect();
            Ok((Backend::Synthetic(policy), prompts))
        }
        BackendKind::Http => {
            let path = cfg.data.prompts_file.as_ref().ok_or_else(|| ConfigError("missing data.prompts_file".into()))?;
            let f = File::open(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            let mut prompts = Vec::new();
            let mut answers = HashMap::new();
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: PromptRecord = serde_json::from_str(&line)
                    .map_err(|e| ConfigError(format!("{} line {}: {e}", path.display(), i + 1)))?;
                answers.insert(r.id.clone(), r.answer);
                prompts.push(Prompt { id: r.id, tokens: Vec::new(), text: r.text });
            }
            if cfg.data.prompts > 0 {
                prompts.truncate(cfg.data.prompts);
            }
            let http = HttpBackend::new(cfg.backend.http.clone())?;
            Ok((Backend::Http(http, AnswerGrader { answers }), prompts))
        }
    }
}

fn search_config(cfg: &RunConfig) -> SearchConfig {
    cfg.search.to_search(cfg.backend.kind, cfg.seed)
}

pub fn cmd_search(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let (backend, prompts) = load_backend(cfg)?;
    let sc = search_config(cfg);
    sc.validate()?;
    let outs = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut c = sc.clone();
            c.gen.seed = evalx::prompt_seed(cfg.seed, i);
            eptree_search(backend.policy(), backend.grader(), p, &c)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let forest_dir = dir.file("forests");
    fs::create_dir_all(&forest_dir)?;
    let header = json!({ "config_hash": dir.hash, "search": sc });
    let mut table = CsvTable::new(
        "search",
        &dir.hash,
        &["prompt_id", "leaves", "distinct_leaves", "expected_leaves", "shortfall", "generated_tokens", "backend_calls", "correct_leaves", "passed"],
    );
    let mut rows = Vec::new();
    let mut events = Vec::new();
    for (i, o) in outs.into_iter().enumerate() {
        let f = BufWriter::new(File::create(forest_dir.join(format!("forest-{i:04}.jsonl")))?);
        gentree::write_forest(&o.forest, &header, f)?;
        let correct: Vec<bool> = o
            .forest
            .leaves()
            .into_iter()
            .map(|l| o.forest.node(l).map(|n| n.correct == Some(true)))
            .collect::<Result<_, _>>()?;
        let r = &o.report;
        let n_correct = correct.iter().filter(|&&c| c).count();
        table.push(vec![
            o.forest.prompt().id.clone(),
            r.leaves.to_string(),
            r.distinct_leaves.to_string(),
            r.expected_leaves.to_string(),
            r.shortfall.to_string(),
            r.generated_tokens.to_string(),
            r.backend_calls.to_string(),
            n_correct.to_string(),
            (n_correct > 0).to_string(),
        ]);
        events.extend(o.fork_events);
        rows.push(PromptEval { prompt_id: o.forest.prompt().id.clone(), correct, report: o.report });
    }
    dir.write_csv("search.csv", &table)?;
    let rec = EvalRecord::from_prompts("search", rows, events)?;
    let mut summary = json!({
        "config_hash": dir.hash,
        "prompts": rec.prompts.len(),
        "passrate": rec.passrate,
        "mean_tokens": rec.mean_tokens,
        "mean_leaves": rec.mean_leaves,
        "leaves_per_token": rec.leaves_per_token,
        "fork_events": rec.fork_events.len(),
    });
    if !rec.fork_events.is_empty() {
        let h = evalx::fork_position_histogram(&rec.fork_events, cfg.search.histogram_bins)?;
        dir.write_csv("fork_positions.csv", &evalx::histogram_table(&h, &dir.hash))?;
        let freq = evalx::fork_token_frequency(&rec.fork_events, cfg.search.top_tokens);
        dir.write_csv("fork_tokens.csv", &evalx::token_table(&freq, |t| backend.token_text(t), &dir.hash))?;
        summary["position_chi_square"] = json!(h.chi_square);
        summary["position_p_value"] = json!(h.p_value);
    }
    dir.write_json("summary.json", &summary)?;
    println!(
        "{} prompts  PassRate {:.4}  #Leaf {:.2}  #Token {:.1}  fork events {}",
        rec.prompts.len(),
        rec.passrate,
        rec.mean_leaves,
        rec.mean_tokens,
        rec.fork_events.len()
    );
    Ok(())
}

pub fn print_sweep(rows: &[evalx::SweepRow]) {
    println!("{:>14} {:>8} {:>9} {:>9}", "(M,N,L,T)", "#Leaf", "PassRate", "#Token");
    for r in rows {
        let cfg = format!("({},{},{},{})", r.m, r.n, r.l, r.t);
        match &r.error {
            Some(e) => println!("{cfg:>14} error: {e}"),
            None => println!("{cfg:>14} {:>8.2} {:>9.4} {:>9.1}", r.leaves, r.passrate, r.tokens),
        }
    }
}

pub fn cmd_sweep(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let (backend, prompts) = load_backend(cfg)?;
    let base = search_config(cfg);
    let configs: Vec<SearchConfig> = cfg
        .sweep
        .configs
        .iter()
        .map(|c| SearchConfig { m: c[0], n: c[1], l: c[2], t: c[3], ..base.clone() })
        .collect();
    let rows = evalx::sweep(backend.policy(), backend.grader(), &prompts, &configs, cfg.seed)?;
    dir.write_csv("sweep.csv", &evalx::sweep_table(&rows, &dir.hash))?;
    print_sweep(&rows);
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let (backend, prompts) = load_backend(cfg)?;
    let sc = search_config(cfg);
    let mut table = CsvTable::new("ablation", &dir.hash, &["seed", "strategy", "passrate", "mean_tokens", "mean_leaves"]);
    let (mut ent, mut rnd) = (Vec::new(), Vec::new());
    for i in 0..cfg.ablate.seeds as u64 {
        let seed = cfg.seed.wrapping_add(i);
        let (e, r) = evalx::ablation_fork_strategy(backend.policy(), backend.grader(), &prompts, &sc, seed)?;
        for (name, rec) in [("entropy", &e), ("random", &r)] {
            table.push(vec![
                seed.to_string(),
                name.into(),
                format_f64(rec.passrate),
                format_f64(rec.mean_tokens),
                format_f64(rec.mean_leaves),
            ]);
        }
        ent.push(e.passrate);
        rnd.push(r.passrate);
    }
    dir.write_csv("ablation.csv", &table)?;
    let st = evalx::sign_test(&ent, &rnd);
    let (em, es) = evalx::mean_se(&ent);
    let (rm, rs) = evalx::mean_se(&rnd);
    dir.write_json(
        "ablation.json",
        &json!({
            "config_hash": dir.hash,
            "entropy": { "mean": em, "se": es },
            "random": { "mean": rm, "se": rs },
            "sign_test": st,
            "alpha": cfg.ablate.alpha,
            "significant": st.significant(cfg.ablate.alpha),
        }),
    )?;
    println!("entropy PassRate {em:.4} ± {es:.4}");
    println!("random  PassRate {rm:.4} ± {rs:.4}");
    println!("sign test: {} wins, {} losses, {} ties, p = {:.4}", st.wins, st.losses, st.ties, st.p_value);
    Ok(())
}

pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    let t = &cfg.train;
    let sampler = match t.sampler {
        SamplerKind::Treerl => {
            let mut search = search_config(cfg);
            search.mask_tail_fraction = t.mask_tail_fraction;
            Sampler::TreeRl { search, scheme: t.scheme.clone() }
        }
        SamplerKind::Chainrl => Sampler::ChainRl { k: t.k, variant: t.variant, gen: search_config(cfg).gen },
    };
    TrainConfig {
        sampler,
        prompts_per_step: t.prompts_per_step,
        lr: t.lr,
        lr_multiplier: t.lr_multiplier,
        kl_beta: t.kl_beta,
        length_normalize: t.length_normalize,
        steps: t.steps,
        seed: cfg.seed,
        eval_every: t.eval_every,
        eval_prompts: t.eval_prompts,
        eval_passrate_samples: t.eval_passrate_samples,
        eval_seed: t.eval_seed,
        snapshot_every: t.snapshot_every,
    }
}

struct Streamer<'a> {
    dir: &'a RunDir,
    history: BufWriter<File>,
    written: Option<usize>,
    snapshot_every: usize,
    error: Option<std::io::Error>,
}

impl Streamer<'_> {
    /// Write the header (once) and any records not yet on disk.
    fn flush_records(&mut self, h: &TrainHistory) -> std::io::Result<()> {
        let start = match self.written {
            Some(n) => n,
            None => {
                let head = json!({ "config_hash": self.dir.hash, "schema_version": SCHEMA_VERSION, "initial": h.initial });
                serde_json::to_writer(&mut self.history, &head)?;
                self.history.write_all(b"\n")?;
                0
            }
        };
        for r in &h.records[start..] {
            serde_json::to_writer(&mut self.history, r)?;
            self.history.write_all(b"\n")?;
        }
        self.written = Some(h.records.len());
        self.history.flush()
    }

    fn step(&mut self, policy: &SynthPolicy, h: &TrainHistory) -> std::io::Result<()> {
        self.flush_records(h)?;
        if self.snapshot_every > 0 && h.records.len() % self.snapshot_every == 0 {
            write_policy(&self.dir.file(&format!("snapshots/step-{:05}.txt", h.records.len())), policy, &self.dir.hash)?;
        }
        Ok(())
    }
}

impl TrainObserver for Streamer<'_> {
    fn on_step(&mut self, policy: &SynthPolicy, h: &TrainHistory) {
        if self.error.is_none() {
            self.error = self.step(policy, h).err();
        }
    }
}

fn write_policy(path: &Path, policy: &SynthPolicy, hash: &str) -> std::io::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "# config_hash={hash}")?;
    policy.write_snapshot(&mut f)?;
    f.flush()
}

/// History and policy from the newest snapshot of an earlier train run.
fn resume_state(run: &Path) -> Result<(TrainHistory, SynthPolicy)> {
    let snaps = run.join("snapshots");
    let mut best: Option<(usize, PathBuf)> = None;
    for e in fs::read_dir(&snaps).map_err(|e| ConfigError(format!("{}: {e}", snaps.display())))? {
        let p = e?.path();
        let step = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.strip_suffix(".txt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(s) = step {
            if best.as_ref().map_or(true, |b| s > b.0) {
                best = Some((s, p));
            }
        }
    }
    let (step, path) = best.ok_or_else(|| ConfigError(format!("no step snapshots in {}", snaps.display())))?;
    let policy = read_snapshot(&path)?;
    let f = File::open(run.join("history.jsonl")).context("opening history.jsonl")?;
    let mut lines = BufReader::new(f).lines();
    let head: serde_json::Value = serde_json::from_str(&lines.next().context("empty history")??)?;
    let initial = serde_json::from_value(head["initial"].clone()).context("history header")?;
    let mut records = Vec::with_capacity(step);
    for line in lines.take(step) {
        records.push(serde_json::from_str(&line?)?);
    }
    if records.len() != step {
        return Err(ConfigError(format!("history has fewer than {step} records")).into());
    }
    Ok((TrainHistory { initial, records }, policy))
}

pub fn cmd_train(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    if cfg.backend.kind != BackendKind::Synthetic {
        return Err(ConfigError("training needs the synthetic backend".into()).into());
    }
    let tc = train_config(cfg);
    tc.validate()?;
    let (history, mut policy) = match &cfg.train.resume {
        Some(run) => resume_state(run)?,
        None => (TrainHistory::default(), synthetic_policy(cfg)?),
    };
    fs::create_dir_all(dir.file("snapshots"))?;
    let hist_file = BufWriter::new(File::create(dir.file("history.jsonl"))?);
    let mut streamer = Streamer { dir, history: hist_file, written: None, snapshot_every: tc.snapshot_every, error: None };
    let result = trainer::train_with(&mut policy, &tc, history, &mut streamer);
    if let Some(e) = streamer.error.take() {
        return Err(e).context("writing training artifacts");
    }
    let h = match result {
        Ok(h) => h,
        Err(e @ TrainError::NonFinite { .. }) => {
            write_policy(&dir.file("snapshots/diagnostic.txt"), &policy, &dir.hash)?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    streamer.flush_records(&h)?;
    write_policy(&dir.file("snapshots/final.txt"), &policy, &dir.hash)?;

    let mut table = CsvTable::new(
        "train",
        &dir.hash,
        &["step", "cumulative_tokens", "mean_reward", "grad_norm", "mean_kl", "greedy_accuracy", "sampled_accuracy", "passrate"],
    );
    let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
    for r in &h.records {
        let e = r.eval.as_ref();
        table.push(vec![
            (r.step + 1).to_string(),
            r.cumulative_tokens.to_string(),
            format_f64(r.mean_reward),
            format_f64(r.grad_norm),
            format_f64(r.mean_kl),
            opt(e.map(|e| e.greedy_accuracy)),
            opt(e.and_then(|e| e.sampled_accuracy)),
            opt(e.and_then(|e| e.passrate)),
        ]);
    }
    dir.write_csv("train.csv", &table)?;
    let max_kl = h.records.iter().map(|r| r.mean_kl).fold(0.0, f64::max);
    let last = h.records.iter().rev().find_map(|r| r.eval.clone()).unwrap_or_else(|| h.initial.clone());
    dir.write_json(
        "summary.json",
        &json!({
            "config_hash": dir.hash,
            "sampler": tc.sampler.name(),
            "steps": h.records.len(),
            "cumulative_tokens": h.cumulative_tokens(),
            "initial": h.initial,
            "final": last,
            "max_mean_kl": max_kl,
            "kl_cap": cfg.train.kl_cap,
            "kl_within_cap": max_kl <= cfg.train.kl_cap,
        }),
    )?;
    println!(
        "{}: {} steps, {} tokens, greedy {:.4} -> {:.4}, sampled {} -> {}",
        tc.sampler.name(),
        h.records.len(),
        h.cumulative_tokens(),
        h.initial.greedy_accuracy,
        last.greedy_accuracy,
        h.initial.sampled_accuracy.map_or("-".into(), |v| format!("{v:.4}")),
        last.sampled_accuracy.map_or("-".into(), |v| format!("{v:.4}")),
    );
    Ok(())
}

pub fn cmd_theory(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let grid: Vec<(usize, usize)> = cfg.theory.grid.iter().map(|c| (c[0], c[1])).collect();
    let bridge = cfg.theory.bridge_config();
    let report = theory::theorem_report(&grid, cfg.theory.samples, cfg.seed, bridge.as_ref())?;
    let mut v = serde_json::to_value(&report)?;
    v["config_hash"] = json!(dir.hash);
    dir.write_json("theory.json", &v)?;
    let text = report.to_text();
    fs::write(dir.file("theory.txt"), format!("# config_hash={}\n{text}", dir.hash))?;
    print!("{text}");
    println!("all verdicts: {}", report.verdicts.all());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_number_extraction() {
        assert_eq!(last_number("so the answer is 42."), Some("42"));
        assert_eq!(last_number("x = -3"), Some("-3"));
        assert_eq!(last_number("2.5 then 7"), Some("7"));
        assert_eq!(last_number("none"), None);
    }
}
