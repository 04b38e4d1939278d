//! Run configuration: a TOML file plus dotted `--set` overrides.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;
use treerl::credit::RewardScheme;
use treerl::policy::{GenParams, HttpConfig, SynthInit};
use treerl::search::{ForkStrategy, SearchConfig};
use treerl::theory::BridgeConfig;
use treerl::trainer::AdvantageVariant;

#[derive(Debug, Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

fn cfg_err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Search,
    Sweep,
    Ablate,
    Train,
    Theory,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Search => "search",
            Command::Sweep => "sweep",
            Command::Ablate => "ablate",
            Command::Train => "train",
            Command::Theory => "theory",
            Command::Report => "report",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub threads: usize,
    pub backend: BackendConfig,
    pub data: DataConfig,
    pub search: SearchSection,
    pub sweep: SweepSection,
    pub ablate: AblateSection,
    pub train: TrainSection,
    pub theory: TheorySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            backend: BackendConfig::default(),
            data: DataConfig::default(),
            search: SearchSection::default(),
            sweep: SweepSection::default(),
            ablate: AblateSection::default(),
            train: TrainSection::default(),
            theory: TheorySection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Http,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub synthetic: SyntheticConfig,
    pub http: HttpConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub modulus: u32,
    pub k: usize,
    pub order: usize,
    pub noise_scale: f64,
    pub correct_bias: f64,
    pub eos_penalty: f64,
    pub operator_penalty: f64,
    pub init_seed: u64,
    /// Load policy logits from a snapshot instead of the initial table.
    pub snapshot: Option<PathBuf>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            modulus: 20,
            k: 16,
            order: 1,
            noise_scale: 1.0,
            correct_bias: 6.0,
            eos_penalty: 6.0,
            operator_penalty: 4.0,
            init_seed: 0,
            snapshot: None,
        }
    }
}

impl SyntheticConfig {
    pub fn init(&self) -> SynthInit {
        SynthInit {
            noise_scale: self.noise_scale,
            correct_bias: self.correct_bias,
            eos_penalty: self.eos_penalty,
            operator_penalty: self.operator_penalty,
            seed: self.init_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of synthetic prompts.
    pub prompts: usize,
    pub prompt_seed: u64,
    /// JSONL of `{"id", "text", "answer"}` records for the HTTP backend.
    pub prompts_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { prompts: 100, prompt_seed: 99, prompts_file: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub m: usize,
    pub n: usize,
    pub l: usize,
    pub t: usize,
    pub mask_tail_fraction: f64,
    pub fork_strategy: ForkStrategy,
    pub allow_mask_fallback: bool,
    pub temperature: f64,
    pub top_p: f64,
    /// Defaults to the backend's usual cap when unset.
    pub max_new_tokens: Option<usize>,
    /// Relative-position bins of the fork histogram.
    pub histogram_bins: usize,
    pub top_tokens: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let gen = GenParams::synthetic();
        Self {
            m: 6,
            n: 2,
            l: 1,
            t: 2,
            mask_tail_fraction: 0.2,
            fork_strategy: ForkStrategy::Entropy,
            allow_mask_fallback: false,
            temperature: gen.temperature,
            top_p: gen.top_p,
            max_new_tokens: None,
            histogram_bins: 20,
            top_tokens: 10,
        }
    }
}

impl SearchSection {
    pub fn to_search(&self, kind: BackendKind, seed: u64) -> SearchConfig {
        let base = match kind {
            BackendKind::Synthetic => GenParams::synthetic(),
            BackendKind::Http => GenParams::http(),
        };
        SearchConfig {
            m: self.m,
            n: self.n,
            l: self.l,
            t: self.t,
            mask_tail_fraction: self.mask_tail_fraction,
            fork_strategy: self.fork_strategy,
            allow_mask_fallback: self.allow_mask_fallback,
            gen: GenParams {
                temperature: self.temperature,
                top_p: self.top_p,
                max_new_tokens: self.max_new_tokens.unwrap_or(base.max_new_tokens),
                seed,
            },
        }
    }
}

/// The appendix sweep grid.
pub fn default_sweep_grid() -> Vec<[usize; 4]> {
    vec![
        [8, 3, 1, 1],
        [7, 2, 1, 2],
        [6, 2, 2, 1],
        [6, 2, 1, 2],
        [5, 3, 1, 2],
        [5, 2, 1, 3],
        [5, 3, 2, 1],
        [5, 1, 2, 3],
        [16, 2, 2, 2],
        [16, 4, 1, 2],
        [16, 2, 1, 4],
        [9, 5, 1, 3],
        [9, 3, 1, 5],
        [8, 8, 1, 2],
        [8, 4, 1, 4],
        [8, 8, 2, 1],
        [8, 4, 2, 2],
        [8, 2, 2, 4],
        [16, 0, 0, 0],
        [64, 0, 0, 0],
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// `[m, n, l, t]` rows; other search keys come from `[search]`.
    pub configs: Vec<[usize; 4]>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { configs: default_sweep_grid() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub seeds: usize,
    pub alpha: f64,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { seeds: 20, alpha: 0.05 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Treerl,
    Chainrl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub sampler: SamplerKind,
    /// Chains per prompt for ChainRL.
    pub k: usize,
    pub variant: AdvantageVariant,
    pub scheme: RewardScheme,
    /// Tail mask used by TreeRL sampling; overrides `search.mask_tail_fraction`.
    pub mask_tail_fraction: f64,
    pub prompts_per_step: usize,
    pub lr: f64,
    pub lr_multiplier: f64,
    pub kl_beta: f64,
    pub length_normalize: bool,
    pub steps: usize,
    pub eval_every: usize,
    pub eval_prompts: usize,
    pub eval_passrate_samples: usize,
    pub eval_seed: u64,
    pub snapshot_every: usize,
    /// Largest mean per-token KL to the reference policy the summary accepts.
    pub kl_cap: f64,
    /// Run directory of an earlier `train` run to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Treerl,
            k: 16,
            variant: AdvantageVariant::Grpo,
            scheme: RewardScheme::ReweightedSum,
            mask_tail_fraction: 0.05,
            prompts_per_step: 16,
            lr: 1.5e-6,
            lr_multiplier: 1e8,
            kl_beta: 1e-4,
            length_normalize: false,
            steps: 300,
            eval_every: 20,
            eval_prompts: 200,
            eval_passrate_samples: 8,
            eval_seed: 0xE7A1,
            snapshot_every: 50,
            kl_cap: 0.5,
            resume: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    /// `[n, t]` cells of the two-iteration check.
    pub grid: Vec<[usize; 2]>,
    pub samples: usize,
    pub bridge: bool,
    pub bridge_configs: Vec<[usize; 4]>,
    pub bridge_seeds: usize,
    pub seq_len: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        let b = BridgeConfig::default();
        Self {
            grid: treerl::theory::default_grid().into_iter().map(|(n, t)| [n, t]).collect(),
            samples: 100_000,
            bridge: true,
            bridge_configs: b.configs.iter().map(|&(m, n, l, t)| [m, n, l, t]).collect(),
            bridge_seeds: b.seeds,
            seq_len: b.seq_len,
        }
    }
}

impl TheorySection {
    pub fn bridge_config(&self) -> Option<BridgeConfig> {
        self.bridge.then(|| BridgeConfig {
            configs: self.bridge_configs.iter().map(|c| (c[0], c[1], c[2], c[3])).collect(),
            seeds: self.bridge_seeds,
            seq_len: self.seq_len,
        })
    }
}

/// Parse an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Apply `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(cfg_err(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| cfg_err(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Load the config file (if any), apply overrides, then the seed flag.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, ConfigError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| cfg_err(format!("{}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| cfg_err(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.search;
        if s.m == 0 {
            return Err(cfg_err("search.m must be at least 1"));
        }
        if !(0.0..1.0).contains(&s.mask_tail_fraction) || !(0.0..1.0).contains(&self.train.mask_tail_fraction) {
            return Err(cfg_err("mask_tail_fraction must lie in [0, 1)"));
        }
        if s.histogram_bins == 0 {
            return Err(cfg_err("search.histogram_bins must be positive"));
        }
        if self.sweep.configs.iter().any(|c| c[0] == 0) {
            return Err(cfg_err("sweep configs need m >= 1"));
        }
        if self.ablate.seeds == 0 {
            return Err(cfg_err("ablate.seeds must be positive"));
        }
        if self.theory.grid.iter().any(|c| c[0] == 0 || c[1] == 0) {
            return Err(cfg_err("theory grid cells need n, t >= 1"));
        }
        if self.backend.kind == BackendKind::Http && self.data.prompts_file.is_none() {
            return Err(cfg_err("the http backend needs data.prompts_file"));
        }
        if self.backend.kind == BackendKind::Synthetic {
            treerl::policy::ChainSum::new(self.backend.synthetic.modulus, self.backend.synthetic.k)
                .map_err(|e| cfg_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON of the command and config.
    pub fn hash(&self, command: Command) -> String {
        let v = serde_json::json!({ "command": command, "config": self });
        let canonical = serde_json::to_string(&v).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
