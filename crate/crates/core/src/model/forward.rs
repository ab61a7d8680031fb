use crate::gating::{apply_hard, top_k_mask, ComponentLayout, Site};
use crate::rng::{stream, Purpose};
use crate::tensor::{AttentionSpec, Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

use super::{
    AttentionParams, Bound, FfnParams, GateValues, LayerParams, Norm, SparseModel, Transformer, PAD,
};

/// Padded batch of token sequences, `batch x len` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl SeqBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::input("batch contains no tokens or an empty sequence"));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat(PAD).take(len - s.len()));
        }
        Ok(SeqBatch {
            tokens,
            batch: seqs.len(),
            len,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

/// Dropout randomness keyed by `(seed, step, call index)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutCtx {
    pub p: f64,
    pub seed: u64,
    pub step: u64,
    pub calls: u64,
}

/// Everything a forward pass records into.
pub struct Ctx<'a, T> {
    pub g: &'a mut Graph<T>,
    pub bound: &'a Bound,
    pub dropout: Option<DropoutCtx>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, bound: &'a Bound) -> Self {
        Ctx {
            g,
            bound,
            dropout: None,
        }
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        match &mut self.dropout {
            Some(d) if d.p > 0.0 => {
                let mut rng = stream(d.seed, Purpose::Dropout, d.step, d.calls);
                d.calls += 1;
                self.g.dropout(x, d.p, &mut rng)
            }
            _ => Ok(x),
        }
    }

    fn norm(&mut self, x: Var, n: &Norm, eps: f64) -> Result<Var> {
        let (gain, bias) = (self.bound.var(n.gain), self.bound.var(n.bias));
        self.g.layer_norm(x, gain, bias, eps)
    }
}

/// Score handles for one layer. `None` means the kind is not gated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerGates {
    pub gamma: Option<Var>,
    pub heads: Option<Var>,
    pub cross: Option<Var>,
    pub blocks: Option<Var>,
}

/// Query/key geometry of one attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape<'a> {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub key_lengths: &'a [usize],
    pub causal: bool,
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn gate_len<T: Scalar>(g: &Graph<T>, v: Var, expected: usize, what: &str) -> Result<()> {
    let n = g.value(v).numel();
    if n != expected {
        return Err(Error::config(format!("{what} scores have length {n}, expected {expected}")));
    }
    Ok(())
}

/// Multi-head attention of `x` over `memory`. Head `h`'s output is scaled by
/// `alpha[h]` before the heads are concatenated and projected.
pub fn attention_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    p: &AttentionParams,
    x: Var,
    memory: Var,
    shape: &AttnShape<'_>,
    alpha: Option<Var>,
) -> Result<Var> {
    if let Some(a) = alpha {
        gate_len(ctx.g, a, p.heads, "head")?;
    }
    let b = ctx.bound;
    let q = linear(ctx.g, x, b.var(p.wq), b.var(p.bq))?;
    let k = linear(ctx.g, memory, b.var(p.wk), b.var(p.bk))?;
    let v = linear(ctx.g, memory, b.var(p.wv), b.var(p.bv))?;
    let spec = AttentionSpec {
        batch: shape.batch,
        q_len: shape.q_len,
        k_len: shape.k_len,
        heads: p.heads,
        head_dim: p.head_dim,
        causal: shape.causal,
        key_lengths: shape.key_lengths.to_vec(),
    };
    let mut heads = ctx.g.attention(q, k, v, spec)?;
    if let Some(a) = alpha {
        let rows = ctx.g.value(heads).rows();
        let tile = ctx.g.block_tile(a, rows, p.head_dim, false)?;
        heads = ctx.g.mul(heads, tile)?;
    }
    linear(ctx.g, heads, b.var(p.wo), b.var(p.bo))
}

/// `ReLU(y (W1 ⊙ β) + b1) (βᵀ ⊙ W2) + b2` where β tiles each block score
/// across its columns of `W1` and rows of `W2`.
pub fn ffn_forward<T: Scalar>(ctx: &mut Ctx<'_, T>, p: &FfnParams, y: Var, beta: Option<Var>) -> Result<Var> {
    let b = ctx.bound;
    let (mut w1, mut w2) = (b.var(p.w1), b.var(p.w2));
    if let Some(beta) = beta {
        gate_len(ctx.g, beta, p.blocks, "block")?;
        let d = ctx.g.shape(w1)[0];
        let t1 = ctx.g.block_tile(beta, d, p.block_width, false)?;
        w1 = ctx.g.mul(w1, t1)?;
        let t2 = ctx.g.block_tile(beta, d, p.block_width, true)?;
        w2 = ctx.g.mul(w2, t2)?;
    }
    let h = linear(ctx.g, y, w1, b.var(p.b1))?;
    let h = ctx.g.relu(h);
    linear(ctx.g, h, w2, b.var(p.b2))
}

fn residual<T: Scalar>(ctx: &mut Ctx<'_, T>, u: Var, branch: Var, gamma: Option<Var>) -> Result<Var> {
    let branch = ctx.dropout(branch)?;
    let branch = match gamma {
        Some(gv) => ctx.g.mul(branch, gv)?,
        None => branch,
    };
    ctx.g.add(u, branch)
}

/// Pre-norm layer: `v = u + γ·Attn(LN(u))`, (decoder: `v += γ·Cross(LN(v))`),
/// `u' = v + γ·FFN(LN(v))`. A layer whose γ is exactly zero returns `u`
/// without computing its branches.
pub fn layer_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    layer: &LayerParams,
    u: Var,
    self_shape: &AttnShape<'_>,
    memory: Option<(Var, &AttnShape<'_>)>,
    gates: &LayerGates,
    eps: f64,
) -> Result<Var> {
    if let Some(gv) = gates.gamma {
        gate_len(ctx.g, gv, 1, "layer")?;
        if ctx.g.item(gv) == T::zero() {
            return Ok(u);
        }
    }
    let x = ctx.norm(u, &layer.norm_attn, eps)?;
    let a = attention_forward(ctx, &layer.self_attn, x, x, self_shape, gates.heads)?;
    let mut v = residual(ctx, u, a, gates.gamma)?;
    if let Some(cross) = &layer.cross {
        let (mem, shape) =
            memory.ok_or_else(|| Error::config("decoder layer called without encoder memory"))?;
        let x = ctx.norm(v, &cross.norm, eps)?;
        let c = attention_forward(ctx, &cross.attn, x, mem, shape, gates.cross)?;
        v = residual(ctx, v, c, gates.gamma)?;
    }
    let x = ctx.norm(v, &layer.norm_ffn, eps)?;
    let f = ffn_forward(ctx, &layer.ffn, x, gates.blocks)?;
    residual(ctx, v, f, gates.gamma)
}

/// Splits a site's score vector into per-layer gate handles.
pub fn gates_from_scores<T: Scalar>(g: &mut Graph<T>, layout: &ComponentLayout, scores: Var) -> Result<Vec<LayerGates>> {
    if g.value(scores).numel() != layout.len() {
        return Err(Error::config(format!(
            "{} score vector has {} entries, layout needs {}",
            layout.site,
            g.value(scores).numel(),
            layout.len()
        )));
    }
    let mut out = Vec::with_capacity(layout.layers);
    for r in 0..layout.layers {
        let s = layout.slots(r);
        let mut slice = |slot: Option<usize>, n: usize| -> Result<Option<Var>> {
            slot.map(|o| g.slice_cols(scores, o, n)).transpose()
        };
        out.push(LayerGates {
            heads: slice(s.heads, layout.heads)?,
            cross: slice(s.cross, layout.heads)?,
            blocks: slice(s.blocks, layout.blocks)?,
            gamma: slice(s.layer, 1)?,
        });
    }
    Ok(out)
}

/// Constant gate handles from baked score values.
pub fn gates_from_values<T: Scalar>(g: &mut Graph<T>, values: &[GateValues]) -> Result<Vec<LayerGates>> {
    let mut konst = |v: &Option<Vec<f64>>| -> Result<Option<Var>> {
        v.as_ref()
            .map(|xs| g.constant(vec![xs.len()], xs.iter().map(|&x| T::of(x)).collect()))
            .transpose()
    };
    let mut out = Vec::with_capacity(values.len());
    for gv in values {
        out.push(LayerGates {
            heads: konst(&gv.heads)?,
            cross: konst(&gv.cross)?,
            blocks: konst(&gv.blocks)?,
            gamma: konst(&gv.gamma.map(|x| vec![x]))?,
        });
    }
    Ok(out)
}

fn sinusoid<T: Scalar>(len: usize, d: usize, batch: usize) -> Vec<T> {
    let mut row = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            row.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    let mut out = Vec::with_capacity(batch * row.len());
    for _ in 0..batch {
        out.extend_from_slice(&row);
    }
    out
}

impl<T: Scalar> Transformer<T> {
    fn check_len(&self, seqs: &SeqBatch) -> Result<()> {
        if seqs.len > self.config.max_len {
            return Err(Error::input(format!(
                "sequence of length {} exceeds max_len {}",
                seqs.len, self.config.max_len
            )));
        }
        Ok(())
    }

    fn embed(&self, ctx: &mut Ctx<'_, T>, seqs: &SeqBatch, lang: usize) -> Result<Var> {
        self.check_len(seqs)?;
        let d = self.config.d;
        let table = ctx.bound.var(self.arch.embed);
        let x = ctx.g.gather(table, &seqs.tokens)?;
        let x = ctx.g.scale(x, T::of((d as f64).sqrt()));
        let pos = ctx.g.constant(vec![seqs.rows(), d], sinusoid(seqs.len, d, seqs.batch))?;
        let mut x = ctx.g.add(x, pos)?;
        if let Some(le) = self.arch.lang_embed {
            let ids = vec![lang; seqs.rows()];
            let l = ctx.g.gather(ctx.bound.var(le), &ids)?;
            x = ctx.g.add(x, l)?;
        }
        ctx.dropout(x)
    }

    fn check_gates(&self, n_layers: usize, gates: &[LayerGates]) -> Result<()> {
        if gates.len() != n_layers {
            return Err(Error::config(format!(
                "{} layer gates supplied for {n_layers} layers",
                gates.len()
            )));
        }
        Ok(())
    }

    /// Encoder output `[batch * src_len, d]` after the final norm.
    pub fn encode(&self, ctx: &mut Ctx<'_, T>, src: &SeqBatch, src_lang: usize, gates: &[LayerGates]) -> Result<Var> {
        self.check_gates(self.arch.encoder.len(), gates)?;
        let mut x = self.embed(ctx, src, src_lang)?;
        let shape = AttnShape {
            batch: src.batch,
            q_len: src.len,
            k_len: src.len,
            key_lengths: &src.lengths,
            causal: false,
        };
        for (layer, gate) in self.arch.encoder.iter().zip(gates) {
            x = layer_forward(ctx, layer, x, &shape, None, gate, self.config.ln_eps)?;
        }
        ctx.norm(x, &self.arch.enc_norm, self.config.ln_eps)
    }

    /// Vocabulary logits `[batch * tgt_len, vocab]` under teacher forcing.
    pub fn decode(
        &self,
        ctx: &mut Ctx<'_, T>,
        memory: Var,
        src: &SeqBatch,
        tgt_in: &SeqBatch,
        tgt_lang: usize,
        gates: &[LayerGates],
    ) -> Result<Var> {
        self.check_gates(self.arch.decoder.len(), gates)?;
        if src.batch != tgt_in.batch {
            return Err(Error::input("source and target batch sizes differ"));
        }
        let mut x = self.embed(ctx, tgt_in, tgt_lang)?;
        let self_shape = AttnShape {
            batch: tgt_in.batch,
            q_len: tgt_in.len,
            k_len: tgt_in.len,
            key_lengths: &tgt_in.lengths,
            causal: true,
        };
        let cross_shape = AttnShape {
            batch: tgt_in.batch,
            q_len: tgt_in.len,
            k_len: src.len,
            key_lengths: &src.lengths,
            causal: false,
        };
        for (layer, gate) in self.arch.decoder.iter().zip(gates) {
            x = layer_forward(
                ctx,
                layer,
                x,
                &self_shape,
                Some((memory, &cross_shape)),
                gate,
                self.config.ln_eps,
            )?;
        }
        let h = ctx.norm(x, &self.arch.dec_norm, self.config.ln_eps)?;
        let proj = match self.arch.out_proj {
            Some(p) => ctx.bound.var(p),
            None => ctx.g.transpose(ctx.bound.var(self.arch.embed))?,
        };
        ctx.g.matmul(h, proj)
    }

    /// Encoder output and logits in one call.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_, T>,
        src: &SeqBatch,
        tgt_in: &SeqBatch,
        src_lang: &str,
        tgt_lang: &str,
        enc_gates: &[LayerGates],
        dec_gates: &[LayerGates],
    ) -> Result<(Var, Var)> {
        let (sl, tl) = (self.language_index(src_lang)?, self.language_index(tgt_lang)?);
        let memory = self.encode(ctx, src, sl, enc_gates)?;
        let logits = self.decode(ctx, memory, src, tgt_in, tl, dec_gates)?;
        Ok((memory, logits))
    }

    /// Gates of an ungated model, or the baked constants of an extracted one.
    pub fn own_gates(&self, g: &mut Graph<T>) -> Result<(Vec<LayerGates>, Vec<LayerGates>)> {
        match &self.baked {
            Some(b) => Ok((gates_from_values(g, &b.encoder)?, gates_from_values(g, &b.decoder)?)),
            None => Ok((
                vec![LayerGates::default(); self.arch.encoder.len()],
                vec![LayerGates::default(); self.arch.decoder.len()],
            )),
        }
    }
}

impl<T: Scalar> SparseModel<T> {
    /// Forward pass under explicit score vectors for the source language's
    /// encoder components and the target language's decoder components.
    /// `None` leaves that site ungated.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_, T>,
        src: &SeqBatch,
        tgt_in: &SeqBatch,
        src_lang: &str,
        tgt_lang: &str,
        enc_scores: Option<Var>,
        dec_scores: Option<Var>,
    ) -> Result<(Var, Var)> {
        let enc = match enc_scores {
            Some(s) => gates_from_scores(ctx.g, &self.scores.encoder, s)?,
            None => vec![LayerGates::default(); self.net.arch.encoder.len()],
        };
        let dec = match dec_scores {
            Some(s) => gates_from_scores(ctx.g, &self.scores.decoder, s)?,
            None => vec![LayerGates::default(); self.net.arch.decoder.len()],
        };
        self.net.forward(ctx, src, tgt_in, src_lang, tgt_lang, &enc, &dec)
    }
}

/// How a [`SparseModel`] applies its selection scores outside training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Scores ignored: the full dense network.
    Ungated,
    /// Evaluation-mode scores on every component.
    Soft,
    /// Evaluation-mode scores with unselected components zeroed.
    Hard,
}

impl<T: Scalar> SparseModel<T> {
    /// Evaluation-mode score vector of one site, or `None` when nothing is gated.
    pub fn site_scores(&self, language: &str, site: Site, mode: GateMode) -> Result<Option<Vec<f64>>> {
        let layout = self.scores.layout(site);
        if mode == GateMode::Ungated || layout.is_empty() {
            return Ok(None);
        }
        let s = self.scores.sample_scores(language, site, None)?;
        if mode == GateMode::Soft {
            return Ok(Some(s));
        }
        let mask = top_k_mask(layout, &s, &self.config().budgets)?;
        Ok(Some(apply_hard(&s, &mask)?))
    }

    /// Teacher-forced logits under fixed score vectors, outside any training tape.
    pub fn logits_with_scores(
        &self,
        src: &SeqBatch,
        tgt_in: &SeqBatch,
        langs: (&str, &str),
        enc: Option<&[f64]>,
        dec: Option<&[f64]>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.net.params.bind(&mut g, false);
        let konst = |g: &mut Graph<T>, s: Option<&[f64]>| -> Result<Option<Var>> {
            s.map(|xs| g.constant(vec![xs.len()], xs.iter().map(|&x| T::of(x)).collect()))
                .transpose()
        };
        let e = konst(&mut g, enc)?;
        let d = konst(&mut g, dec)?;
        let mut ctx = Ctx::new(&mut g, &bound);
        let (_, logits) = self.forward(&mut ctx, src, tgt_in, langs.0, langs.1, e, d)?;
        Ok(g.value(logits).clone())
    }

    pub fn logits(&self, src: &SeqBatch, tgt_in: &SeqBatch, langs: (&str, &str), mode: GateMode) -> Result<Tensor<T>> {
        let enc = self.site_scores(langs.0, Site::Encoder, mode)?;
        let dec = self.site_scores(langs.1, Site::Decoder, mode)?;
        self.logits_with_scores(src, tgt_in, langs, enc.as_deref(), dec.as_deref())
    }
}

impl<T: Scalar> Transformer<T> {
    /// Teacher-forced logits using the model's own (possibly baked) gates.
    pub fn logits(&self, src: &SeqBatch, tgt_in: &SeqBatch, langs: (&str, &str)) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let (eg, dg) = self.own_gates(&mut g)?;
        let mut ctx = Ctx::new(&mut g, &bound);
        let (_, logits) = self.forward(&mut ctx, src, tgt_in, langs.0, langs.1, &eg, &dg)?;
        Ok(g.value(logits).clone())
    }
}
