//! Encoder-decoder Transformer with score-modulated heads, FFN blocks and layers.
//!
//! A [`Transformer`] stores its layers with explicit per-layer widths, so the
//! same type represents both the full gated model and a physically smaller
//! sub-network produced by [`extract_subnetwork`].

pub mod checkpoint;
mod config;
mod extract;
mod forward;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gating::{ScoreTable, Site};
use crate::rng::{stream, Purpose};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

pub use config::{ModelConfig, BOS, EOS, FIRST_CONTENT, PAD};
pub use extract::{dense_active_architecture, extract_subnetwork};
pub use forward::{
    attention_forward, ffn_forward, gates_from_scores, gates_from_values, layer_forward, Ctx,
    AttnShape, DropoutCtx, GateMode, LayerGates, SeqBatch,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Records every tensor as a leaf. Non-trainable binding skips gradient
    /// bookkeeping entirely.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        g.param(t)
                    } else {
                        g.constant(t.shape.clone(), t.data.clone())
                            .expect("stored tensors are well formed")
                    }
                })
                .collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|x| U::of(x.to_f64_lossy())).collect(),
                    requires_grad: false,
                    grad: None,
                })
                .collect(),
        }
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Multi-head attention with heads laid out as consecutive column blocks of
/// the query/key/value projections and row blocks of the output projection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: usize,
    pub head_dim: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// Two-layer FFN whose inner width is `blocks * block_width`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnParams {
    pub blocks: usize,
    pub block_width: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossParams {
    pub norm: Norm,
    pub attn: AttentionParams,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Position of this layer in the original full stack.
    pub index: usize,
    pub norm_attn: Norm,
    pub self_attn: AttentionParams,
    pub cross: Option<CrossParams>,
    pub norm_ffn: Norm,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub embed: ParamId,
    pub out_proj: Option<ParamId>,
    pub lang_embed: Option<ParamId>,
    pub encoder: Vec<LayerParams>,
    pub decoder: Vec<LayerParams>,
    pub enc_norm: Norm,
    pub dec_norm: Norm,
}

impl Architecture {
    pub fn stack(&self, site: Site) -> &[LayerParams] {
        match site {
            Site::Encoder => &self.encoder,
            Site::Decoder => &self.decoder,
        }
    }
}

/// Score constants carried by one layer of an extracted sub-network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateValues {
    pub gamma: Option<f64>,
    pub heads: Option<Vec<f64>>,
    pub cross: Option<Vec<f64>>,
    pub blocks: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BakedGates {
    pub src_lang: String,
    pub tgt_lang: String,
    pub encoder: Vec<GateValues>,
    pub decoder: Vec<GateValues>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub languages: Vec<String>,
    pub arch: Architecture,
    pub params: ParamStore<T>,
    /// Present on extracted sub-networks only.
    pub baked: Option<BakedGates>,
}

fn xavier<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::of(rng.gen_range(-a..a))).collect();
    Tensor::new(vec![rows, cols], data).expect("positive shape")
}

fn uniform<T: Scalar, R: Rng>(shape: Vec<usize>, a: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect();
    Tensor::new(shape, data).expect("positive shape")
}

struct Builder<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.store.add(format!("{name}.gain"), Tensor::from_f64(vec![d], &vec![1.0; d]).unwrap()),
            bias: self.store.add(format!("{name}.bias"), Tensor::zeros(vec![d])),
        }
    }

    fn attention(&mut self, name: &str, d: usize, heads: usize, head_dim: usize) -> AttentionParams {
        let w = heads * head_dim;
        let mut proj = |suffix: &str, rows: usize, cols: usize| {
            (
                self.store.add(format!("{name}.w{suffix}"), xavier(rows, cols, self.rng)),
                self.store.add(format!("{name}.b{suffix}"), Tensor::zeros(vec![cols])),
            )
        };
        let (wq, bq) = proj("q", d, w);
        let (wk, bk) = proj("k", d, w);
        let (wv, bv) = proj("v", d, w);
        let (wo, bo) = proj("o", w, d);
        AttentionParams {
            heads,
            head_dim,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, name: &str, d: usize, blocks: usize, block_width: usize) -> FfnParams {
        let inner = blocks * block_width;
        FfnParams {
            blocks,
            block_width,
            w1: self.store.add(format!("{name}.w1"), xavier(d, inner, self.rng)),
            b1: self.store.add(format!("{name}.b1"), Tensor::zeros(vec![inner])),
            w2: self.store.add(format!("{name}.w2"), xavier(inner, d, self.rng)),
            b2: self.store.add(format!("{name}.b2"), Tensor::zeros(vec![d])),
        }
    }

    fn layer(&mut self, site: Site, index: usize, c: &ModelConfig) -> LayerParams {
        let name = format!("{site}.{index}");
        let norm_attn = self.norm(&format!("{name}.norm_attn"), c.d);
        let self_attn = self.attention(&format!("{name}.self_attn"), c.d, c.heads, c.head_dim());
        let cross = (site == Site::Decoder).then(|| CrossParams {
            norm: self.norm(&format!("{name}.norm_cross"), c.d),
            attn: self.attention(&format!("{name}.cross_attn"), c.d, c.heads, c.head_dim()),
        });
        let norm_ffn = self.norm(&format!("{name}.norm_ffn"), c.d);
        let ffn = self.ffn(&format!("{name}.ffn"), c.d, c.blocks, c.block_width());
        LayerParams {
            index,
            norm_attn,
            self_attn,
            cross,
            norm_ffn,
            ffn,
        }
    }
}

impl<T: Scalar> Transformer<T> {
    /// Randomly initialized full model.
    pub fn new(config: ModelConfig, languages: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if languages.is_empty() {
            return Err(Error::config("model needs at least one language"));
        }
        let mut rng = stream(seed, Purpose::Init, 0, 0);
        let mut params = ParamStore::default();
        let mut b = Builder {
            store: &mut params,
            rng: &mut rng,
        };
        let emb_scale = (3.0 / config.d as f64).sqrt();
        let embed = b.store.add("embed", uniform(vec![config.vocab_size, config.d], emb_scale, b.rng));
        let out_proj = (!config.tie_embeddings)
            .then(|| b.store.add("out_proj", xavier(config.d, config.vocab_size, b.rng)));
        let lang_embed = config
            .language_embeddings
            .then(|| b.store.add("lang_embed", uniform(vec![languages.len(), config.d], emb_scale, b.rng)));
        let encoder = (0..config.enc_layers)
            .map(|i| b.layer(Site::Encoder, i, &config))
            .collect();
        let decoder = (0..config.dec_layers)
            .map(|i| b.layer(Site::Decoder, i, &config))
            .collect();
        let enc_norm = b.norm("encoder.final_norm", config.d);
        let dec_norm = b.norm("decoder.final_norm", config.d);
        Ok(Transformer {
            config,
            languages,
            arch: Architecture {
                embed,
                out_proj,
                lang_embed,
                encoder,
                decoder,
                enc_norm,
                dec_norm,
            },
            params,
            baked: None,
        })
    }

    pub fn language_index(&self, language: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == language)
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            languages: self.languages.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
            baked: self.baked.clone(),
        }
    }

    /// Multiply-accumulate operations of one decoder step per token, used to
    /// compare architectures independently of timing noise.
    pub fn macs_per_token(&self) -> usize {
        let d = self.config.d;
        let attn = |a: &AttentionParams| 4 * d * a.heads * a.head_dim;
        let ffn = |f: &FfnParams| 2 * d * f.blocks * f.block_width;
        let stack = |layers: &[LayerParams]| -> usize {
            layers
                .iter()
                .map(|l| attn(&l.self_attn) + l.cross.as_ref().map_or(0, |c| attn(&c.attn)) + ffn(&l.ffn))
                .sum()
        };
        stack(&self.arch.encoder) + stack(&self.arch.decoder) + d * self.config.vocab_size
    }
}

/// Full gated model: network parameters plus per-language selection logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseModel<T> {
    pub net: Transformer<T>,
    pub scores: ScoreTable<T>,
}

impl<T: Scalar> SparseModel<T> {
    pub fn new(config: ModelConfig, languages: Vec<String>, seed: u64) -> Result<Self> {
        let net = Transformer::new(config.clone(), languages.clone(), seed)?;
        let scores = ScoreTable::new(languages, config.layout(Site::Encoder), config.layout(Site::Decoder));
        Ok(SparseModel { net, scores })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn cast<U: Scalar>(&self) -> SparseModel<U> {
        let cast_rows = |rows: &Vec<Vec<T>>| -> Vec<Vec<U>> {
            rows.iter()
                .map(|r| r.iter().map(|x| U::of(x.to_f64_lossy())).collect())
                .collect()
        };
        SparseModel {
            net: self.net.cast(),
            scores: ScoreTable {
                languages: self.scores.languages.clone(),
                encoder: self.scores.encoder.clone(),
                decoder: self.scores.decoder.clone(),
                mu_encoder: cast_rows(&self.scores.mu_encoder),
                mu_decoder: cast_rows(&self.scores.mu_decoder),
                temperature: self.scores.temperature,
                eval_temperature: self.scores.eval_temperature,
                prior_p: self.scores.prior_p,
            },
        }
    }
}
