//! Run configuration in a flat `section.key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Unknown and repeated keys are
//! errors. Rendering then parsing reproduces the config exactly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::lora::{InitMode, LoraConfig, SiteSet};
use crate::model::ModelConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} given twice")]
    DuplicateKey(String),
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("bad value for {key}: {reason}")]
    Value { key: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(u64, usize, f64, SiteSet, InitMode, SplitMode, MaskMode);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

/// Empty string means absent.
impl ConfigValue for Option<PathBuf> {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn render(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
}

impl ConfigValue for Vec<VoterRule> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',').map(|r| r.trim().parse()).collect()
    }
    fn render(&self) -> String {
        self.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

/// How the training corpus is routed to the two systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Vote,
    Random,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Vote => "vote",
            SplitMode::Random => "random",
        })
    }
}

impl FromStr for SplitMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vote" => Ok(SplitMode::Vote),
            "random" => Ok(SplitMode::Random),
            _ => Err(format!("expected vote or random, got {s:?}")),
        }
    }
}

/// Where stage masks come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Importance,
    /// Uniformly drawn masks with the importance masks' sizes.
    Random,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Importance => "importance",
            MaskMode::Random => "random",
        })
    }
}

impl FromStr for MaskMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "importance" => Ok(MaskMode::Importance),
            "random" => Ok(MaskMode::Random),
            _ => Err(format!("expected importance or random, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoterRule {
    OperatorCount,
    PromptLength,
    MarkerPresence,
    External,
}

impl fmt::Display for VoterRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VoterRule::OperatorCount => "operator-count",
            VoterRule::PromptLength => "prompt-length",
            VoterRule::MarkerPresence => "marker-presence",
            VoterRule::External => "external-file",
        })
    }
}

impl FromStr for VoterRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "operator-count" => Ok(VoterRule::OperatorCount),
            "prompt-length" => Ok(VoterRule::PromptLength),
            "marker-presence" => Ok(VoterRule::MarkerPresence),
            "external-file" => Ok(VoterRule::External),
            _ => Err(format!("unknown voter rule {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraSection {
    pub rank: usize,
    pub scale: f64,
    pub sites: SiteSet,
    pub init: InitMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSection {
    pub fact_count: usize,
    pub fact_seed: u64,
    pub fact_fraction: f64,
    pub max_depth: usize,
    pub system1_train: usize,
    pub system2_train: usize,
    pub system1_eval: usize,
    pub system2_eval: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSection {
    pub count: usize,
    pub mix_system1: f64,
    pub mix_system2: f64,
    pub mix_random: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSection {
    pub mode: SplitMode,
    pub voters: usize,
    /// Cycled over the voters.
    pub rules: Vec<VoterRule>,
    pub error_rate: f64,
    pub min_ops: usize,
    pub max_chars: usize,
    pub p_two: f64,
    pub verdict_file: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceSection {
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    /// 0 scores every example of each subset.
    pub max_examples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSection {
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mask: MaskMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoSection {
    pub steps: usize,
    pub batch_size: usize,
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub temperature: f64,
    pub max_new: usize,
    pub inner_epochs: usize,
    pub lr: f64,
    pub reward_exact: f64,
    pub reward_format: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub model: ModelSection,
    pub lora: LoraSection,
    pub corpus: CorpusSection,
    pub pretrain: PretrainSection,
    pub split: SplitSection,
    pub importance: ImportanceSection,
    pub partition: PartitionSection,
    pub sft: SftSection,
    pub grpo: GrpoSection,
    pub eval_max_new: usize,
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        impl RunConfig {
            /// Every accepted key, in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let value = value.trim();
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value).map_err(|reason| {
                            ConfigError::Value { key: key.to_string(), reason }
                        })?;
                    })*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render())),*]
            }
        }
    };
}

config_keys! {
    "seed" => seed,
    "output_dir" => output_dir,
    "cache_dir" => cache_dir,
    "model.n_layers" => model.n_layers,
    "model.d_model" => model.d_model,
    "model.n_heads" => model.n_heads,
    "model.d_ff" => model.d_ff,
    "model.max_seq_len" => model.max_seq_len,
    "lora.rank" => lora.rank,
    "lora.scale" => lora.scale,
    "lora.sites" => lora.sites,
    "lora.init" => lora.init,
    "lora.seed" => lora.seed,
    "corpus.fact_count" => corpus.fact_count,
    "corpus.fact_seed" => corpus.fact_seed,
    "corpus.fact_fraction" => corpus.fact_fraction,
    "corpus.max_depth" => corpus.max_depth,
    "corpus.system1_train" => corpus.system1_train,
    "corpus.system2_train" => corpus.system2_train,
    "corpus.system1_eval" => corpus.system1_eval,
    "corpus.system2_eval" => corpus.system2_eval,
    "corpus.seed" => corpus.seed,
    "pretrain.count" => pretrain.count,
    "pretrain.mix_system1" => pretrain.mix_system1,
    "pretrain.mix_system2" => pretrain.mix_system2,
    "pretrain.mix_random" => pretrain.mix_random,
    "pretrain.steps" => pretrain.steps,
    "pretrain.batch_size" => pretrain.batch_size,
    "pretrain.lr" => pretrain.lr,
    "pretrain.seed" => pretrain.seed,
    "split.mode" => split.mode,
    "split.voters" => split.voters,
    "split.rules" => split.rules,
    "split.error_rate" => split.error_rate,
    "split.min_ops" => split.min_ops,
    "split.max_chars" => split.max_chars,
    "split.p_two" => split.p_two,
    "split.verdict_file" => split.verdict_file,
    "split.seed" => split.seed,
    "importance.warmup_steps" => importance.warmup_steps,
    "importance.warmup_lr" => importance.warmup_lr,
    "importance.max_examples" => importance.max_examples,
    "partition.theta" => partition.theta,
    "partition.alpha" => partition.alpha,
    "partition.beta" => partition.beta,
    "partition.mask" => partition.mask,
    "partition.seed" => partition.seed,
    "sft.steps" => sft.steps,
    "sft.batch_size" => sft.batch_size,
    "sft.lr" => sft.lr,
    "sft.beta1" => sft.beta1,
    "sft.beta2" => sft.beta2,
    "sft.eps" => sft.eps,
    "sft.weight_decay" => sft.weight_decay,
    "sft.seed" => sft.seed,
    "grpo.steps" => grpo.steps,
    "grpo.batch_size" => grpo.batch_size,
    "grpo.group_size" => grpo.group_size,
    "grpo.clip_eps" => grpo.clip_eps,
    "grpo.kl_coef" => grpo.kl_coef,
    "grpo.temperature" => grpo.temperature,
    "grpo.max_new" => grpo.max_new,
    "grpo.inner_epochs" => grpo.inner_epochs,
    "grpo.lr" => grpo.lr,
    "grpo.reward_exact" => grpo.reward_exact,
    "grpo.reward_format" => grpo.reward_format,
    "grpo.seed" => grpo.seed,
    "eval.max_new" => eval_max_new,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 1;
        let s = |label: &str| crate::seed::derive(seed, label) % 1_000_000;
        Self {
            seed,
            output_dir: PathBuf::from("runs/default"),
            cache_dir: PathBuf::from("runs/cache"),
            model: ModelSection {
                n_layers: 2,
                d_model: 32,
                n_heads: 2,
                d_ff: 64,
                max_seq_len: 48,
            },
            lora: LoraSection {
                rank: 2,
                scale: 1.0,
                sites: SiteSet::QKVGUD,
                init: InitMode::Standard,
                seed: s("lora"),
            },
            corpus: CorpusSection {
                fact_count: 24,
                fact_seed: 7,
                fact_fraction: 0.3,
                max_depth: 3,
                system1_train: 300,
                system2_train: 150,
                system1_eval: 200,
                system2_eval: 200,
                seed: s("corpus"),
            },
            pretrain: PretrainSection {
                count: 6000,
                mix_system1: 0.15,
                mix_system2: 0.75,
                mix_random: 0.1,
                steps: 4000,
                batch_size: 16,
                lr: 3e-3,
                seed: 17,
            },
            split: SplitSection {
                mode: SplitMode::Vote,
                voters: 5,
                rules: vec![VoterRule::OperatorCount],
                error_rate: 0.0,
                min_ops: 2,
                max_chars: 8,
                p_two: 0.5,
                verdict_file: None,
                seed: s("split"),
            },
            importance: ImportanceSection {
                warmup_steps: 50,
                warmup_lr: 1e-2,
                max_examples: 0,
            },
            partition: PartitionSection {
                theta: 0.9,
                alpha: 1.0,
                beta: 1.0,
                mask: MaskMode::Importance,
                seed: s("partition"),
            },
            sft: SftSection {
                steps: 400,
                batch_size: 8,
                lr: 1e-2,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
                seed: s("sft"),
            },
            grpo: GrpoSection {
                steps: 150,
                batch_size: 8,
                group_size: 4,
                clip_eps: 0.2,
                kl_coef: 0.04,
                temperature: 1.0,
                max_new: 16,
                inner_epochs: 1,
                lr: 5e-3,
                reward_exact: 1.0,
                reward_format: 0.2,
                seed: s("grpo"),
            },
            eval_max_new: 16,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey(key.into()));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.pairs() {
            let sec = key.split_once('.').map_or("", |(s, _)| s);
            if sec != section && !out.is_empty() {
                out.push('\n');
            }
            section = sec;
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        crate::binio::write_atomic(path, self.render().as_bytes())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model_config(crate::corpus::Tokenizer::default().vocab_size()).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.lora_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, v) in [
            ("partition.theta", self.partition.theta),
            ("partition.alpha", self.partition.alpha),
            ("partition.beta", self.partition.beta),
            ("corpus.fact_fraction", self.corpus.fact_fraction),
            ("split.p_two", self.split.p_two),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(0.0..0.5).contains(&self.split.error_rate) {
            return bad(format!("split.error_rate must be in [0, 0.5), got {}", self.split.error_rate));
        }
        if self.split.voters == 0 || self.split.rules.is_empty() {
            return bad("split needs at least one voter and one rule".into());
        }
        if self.split.rules.contains(&VoterRule::External) && self.split.verdict_file.is_none() {
            return bad("external-file voters need split.verdict_file".into());
        }
        if self.grpo.group_size < 2 {
            return bad(format!("grpo.group_size must be >= 2, got {}", self.grpo.group_size));
        }
        if self.corpus.max_depth < 2 {
            return bad("corpus.max_depth must be >= 2".into());
        }
        if self.corpus.system1_train == 0 || self.corpus.system2_train == 0 {
            return bad("training corpus sizes must be >= 1".into());
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            vocab_size,
            max_seq_len: self.model.max_seq_len,
        }
    }

    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora.rank,
            scale: self.lora.scale,
            sites: self.lora.sites,
            init: self.lora.init,
        }
    }

    /// Copy with every per-trial seed re-derived from `seed` and `trial`.
    /// Base-model seeds (pretraining, fact table) are kept so trials share
    /// one cached base.
    pub fn for_trial(&self, trial: u64) -> Self {
        let mut c = self.clone();
        let s = |label: &str| crate::seed::derive(self.seed, &format!("trial{trial}/{label}")) % 1_000_000;
        c.corpus.seed = s("corpus");
        c.lora.seed = s("lora");
        c.split.seed = s("split");
        c.partition.seed = s("partition");
        c.sft.seed = s("sft");
        c.grpo.seed = s("grpo");
        c
    }

    /// Every seed in the config, by key.
    pub fn seeds(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("seed", self.seed),
            ("lora.seed", self.lora.seed),
            ("corpus.fact_seed", self.corpus.fact_seed),
            ("corpus.seed", self.corpus.seed),
            ("pretrain.seed", self.pretrain.seed),
            ("split.seed", self.split.seed),
            ("partition.seed", self.partition.seed),
            ("sft.seed", self.sft.seed),
            ("grpo.seed", self.grpo.seed),
        ]
    }
}
