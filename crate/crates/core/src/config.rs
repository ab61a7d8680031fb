//! Run configuration read from TOML with `[model]`, `[gating]`, `[train]`,
//! `[data]` and an optional `[eval]` section, plus named presets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSpec, FamilySpec, LanguageSpec, Order, Tier};
use crate::gating::{Budgets, SparsityKinds};
use crate::inference::DecodeConfig;
use crate::model::ModelConfig;
use crate::objectives::Coefficients;
use crate::tensor::AdamConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub blocks: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "yes")]
    pub tie_embeddings: bool,
    #[serde(default = "yes")]
    pub language_embeddings: bool,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

fn yes() -> bool {
    true
}

fn default_eps() -> f64 {
    1e-5
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatingSection {
    /// False trains an ungated model of the budgeted (active) architecture.
    #[serde(default = "yes")]
    pub enabled: bool,
    pub sparsity: SparsityKinds,
    pub budgets: Budgets,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default = "one")]
    pub eval_temperature: f64,
    #[serde(default)]
    pub coefficients: Coefficients,
    /// Initial selection logit of every component.
    #[serde(default)]
    pub init_logit: f64,
    /// Learning rate of the selection logits relative to `train.lr`.
    #[serde(default = "one")]
    pub score_lr_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    /// Last step of the soft phase.
    pub phase_switch: usize,
    pub lr: f64,
    pub warmup: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "one")]
    pub clip: f64,
    /// Token budget per batch.
    pub batch_tokens: usize,
    /// Direction sampling temperature.
    pub direction_tau: f64,
    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub seed: u64,
    pub corpus: CorpusSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub gating: GatingSection,
    pub train: TrainSection,
    pub data: DataSection,
    #[serde(default)]
    pub eval: DecodeConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    PaperPublic24,
    PaperOpus100,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper-public24" => Ok(Preset::PaperPublic24),
            "paper-opus100" => Ok(Preset::PaperOpus100),
            other => Err(Error::config(format!("unknown preset `{other}`"))),
        }
    }
}

fn paper_corpus(families: usize, per_family: usize, vocab_size: usize) -> CorpusSpec {
    let orders = [Order::Copy, Order::Reverse, Order::LocalSwap];
    let tiers = [Tier::High, Tier::Medium, Tier::Low];
    CorpusSpec {
        vocab_size,
        min_len: 5,
        max_len: 40,
        families: (0..families)
            .map(|f| FamilySpec {
                name: format!("f{f}"),
                order: orders[f % orders.len()],
                cipher: true,
            })
            .collect(),
        languages: (0..families * per_family)
            .map(|i| LanguageSpec {
                id: format!("l{i:03}"),
                family: format!("f{}", i / per_family),
                tier: tiers[i % tiers.len()],
                swaps: vocab_size / 20,
            })
            .collect(),
        tier_sizes: BTreeMap::from([(Tier::High, 100_000), (Tier::Medium, 20_000), (Tier::Low, 2_000)]),
        valid_per_direction: 500,
        test_per_direction: 1000,
        directions: Vec::new(),
        zero_shot: Vec::new(),
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => RunConfig {
                model: ModelSection {
                    d: 32,
                    d_ff: 128,
                    heads: 4,
                    blocks: 8,
                    enc_layers: 4,
                    dec_layers: 4,
                    max_len: 16,
                    dropout: 0.0,
                    tie_embeddings: true,
                    language_embeddings: true,
                    ln_eps: 1e-5,
                },
                gating: GatingSection {
                    enabled: true,
                    sparsity: SparsityKinds::ALL,
                    budgets: Budgets {
                        enc_layers: 3,
                        dec_layers: 3,
                        heads: 3,
                        blocks: 4,
                    },
                    temperature: 1.0,
                    eval_temperature: 1.0,
                    coefficients: Coefficients::default(),
                    init_logit: 5.0,
                    score_lr_scale: 3.0,
                },
                train: TrainSection {
                    steps: 8000,
                    phase_switch: 1500,
                    lr: 5e-3,
                    warmup: 200,
                    adam: AdamConfig::default(),
                    clip: 1.0,
                    batch_tokens: 320,
                    direction_tau: 5.0,
                    seed: 0,
                    checkpoint_every: 0,
                    log_every: 10,
                },
                data: DataSection {
                    seed: 0,
                    corpus: CorpusSpec::desk(),
                },
                eval: DecodeConfig::default(),
            },
            Preset::PaperPublic24 => RunConfig {
                model: ModelSection {
                    d: 512,
                    d_ff: 2048,
                    heads: 4,
                    blocks: 8,
                    enc_layers: 12,
                    dec_layers: 12,
                    max_len: 256,
                    dropout: 0.1,
                    tie_embeddings: true,
                    language_embeddings: true,
                    ln_eps: 1e-5,
                },
                gating: GatingSection {
                    enabled: true,
                    sparsity: SparsityKinds::ALL,
                    budgets: Budgets {
                        enc_layers: 6,
                        dec_layers: 6,
                        heads: 3,
                        blocks: 4,
                    },
                    temperature: 1.0,
                    eval_temperature: 1.0,
                    coefficients: Coefficients::default(),
                    init_logit: 0.0,
                    score_lr_scale: 1.0,
                },
                train: TrainSection {
                    steps: 100_000,
                    phase_switch: 8_000,
                    lr: 0.0007,
                    warmup: 4_000,
                    adam: AdamConfig::default(),
                    clip: 1.0,
                    batch_tokens: 150_000,
                    direction_tau: 5.0,
                    seed: 0,
                    checkpoint_every: 10_000,
                    log_every: 100,
                },
                data: DataSection {
                    seed: 0,
                    corpus: paper_corpus(6, 4, 32_000),
                },
                eval: DecodeConfig::beam(5, 1.0, 256),
            },
            Preset::PaperOpus100 => RunConfig {
                model: ModelSection {
                    d: 512,
                    d_ff: 4096,
                    heads: 8,
                    blocks: 16,
                    enc_layers: 12,
                    dec_layers: 12,
                    max_len: 256,
                    dropout: 0.1,
                    tie_embeddings: true,
                    language_embeddings: true,
                    ln_eps: 1e-5,
                },
                gating: GatingSection {
                    enabled: true,
                    sparsity: SparsityKinds::ALL,
                    budgets: Budgets {
                        enc_layers: 6,
                        dec_layers: 6,
                        heads: 6,
                        blocks: 8,
                    },
                    temperature: 1.0,
                    eval_temperature: 1.0,
                    coefficients: Coefficients::default(),
                    init_logit: 0.0,
                    score_lr_scale: 1.0,
                },
                train: TrainSection {
                    steps: 500_000,
                    phase_switch: 50_000,
                    lr: 0.0015,
                    warmup: 4_000,
                    adam: AdamConfig::default(),
                    clip: 1.0,
                    batch_tokens: 150_000,
                    direction_tau: 5.0,
                    seed: 0,
                    checkpoint_every: 10_000,
                    log_every: 100,
                },
                data: DataSection {
                    seed: 0,
                    corpus: paper_corpus(10, 10, 64_000),
                },
                eval: DecodeConfig::beam(4, 0.6, 256),
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d: m.d,
            d_ff: m.d_ff,
            heads: m.heads,
            blocks: m.blocks,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            vocab_size: self.data.corpus.vocab_size,
            max_len: m.max_len,
            dropout: m.dropout,
            budgets: self.gating.budgets,
            sparsity: self.gating.sparsity,
            tie_embeddings: m.tie_embeddings,
            language_embeddings: m.language_embeddings,
            ln_eps: m.ln_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.data.corpus.validate()?;
        self.eval.validate()?;
        let t = &self.train;
        if t.steps == 0 {
            return Err(Error::config("train.steps must be positive"));
        }
        if t.phase_switch > t.steps {
            return Err(Error::config("train.phase_switch exceeds train.steps"));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::config("train.lr must be a finite non-negative number"));
        }
        if !(t.direction_tau > 0.0) {
            return Err(Error::config("train.direction_tau must be positive"));
        }
        if !(t.clip > 0.0) {
            return Err(Error::config("train.clip must be positive"));
        }
        if t.batch_tokens < self.data.corpus.max_len + 1 {
            return Err(Error::config("train.batch_tokens cannot hold the longest sentence"));
        }
        if self.data.corpus.max_len + 1 > self.model.max_len {
            return Err(Error::config("corpus sentences exceed model.max_len"));
        }
        let g = &self.gating;
        if !(g.init_logit.is_finite() && g.score_lr_scale >= 0.0 && g.score_lr_scale.is_finite()) {
            return Err(Error::config("gating.init_logit and gating.score_lr_scale must be finite"));
        }
        if !(g.temperature > 0.0 && g.eval_temperature > 0.0) {
            return Err(Error::config("gating temperatures must be positive"));
        }
        let c = &g.coefficients;
        if [c.c_s, c.c_d, c.c_t].iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::config("loss coefficients must be non-negative"));
        }
        Ok(())
    }
}
