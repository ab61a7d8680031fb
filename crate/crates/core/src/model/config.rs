use serde::{Deserialize, Serialize};

use crate::gating::{Budgets, ComponentLayout, Site, SparsityKinds};
use crate::{Error, Result};

/// Reserved token ids shared by every vocabulary.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First id available to content tokens.
pub const FIRST_CONTENT: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    /// FFN inner width, split into `blocks` blocks.
    pub d_ff: usize,
    pub heads: usize,
    pub blocks: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
    pub budgets: Budgets,
    pub sparsity: SparsityKinds,
    #[serde(default = "yes")]
    pub tie_embeddings: bool,
    /// Adds a learned per-language vector to encoder (source language) and
    /// decoder (target language) inputs.
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

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn block_width(&self) -> usize {
        self.d_ff / self.blocks
    }

    pub fn layers(&self, site: Site) -> usize {
        match site {
            Site::Encoder => self.enc_layers,
            Site::Decoder => self.dec_layers,
        }
    }

    pub fn layout(&self, site: Site) -> ComponentLayout {
        ComponentLayout::new(site, self.layers(site), self.heads, self.blocks, self.sparsity)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::config(format!("d={} not divisible by heads={}", self.d, self.heads)));
        }
        if self.d_ff % self.blocks != 0 {
            return Err(Error::config(format!(
                "d_ff={} not divisible by blocks={}",
                self.d_ff, self.blocks
            )));
        }
        if self.d_ff <= self.d {
            return Err(Error::config(format!("d_ff={} must exceed d={}", self.d_ff, self.d)));
        }
        if self.vocab_size <= FIRST_CONTENT {
            return Err(Error::config("vocabulary has no room for content tokens"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps must be positive"));
        }
        for site in [Site::Encoder, Site::Decoder] {
            self.layout(site).validate_budgets(&self.budgets)?;
        }
        Ok(())
    }

    /// Budgets equal to the full architecture.
    pub fn full_budgets(&self) -> Budgets {
        Budgets {
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            blocks: self.blocks,
        }
    }

    /// Whether any budget is strictly below the full architecture for an
    /// enabled sparsity kind.
    pub fn is_strict(&self) -> bool {
        let b = &self.budgets;
        (self.sparsity.layer && (b.enc_layers < self.enc_layers || b.dec_layers < self.dec_layers))
            || (self.sparsity.head && b.heads < self.heads)
            || (self.sparsity.ffn && b.blocks < self.blocks)
    }
}
