use crate::gating::{top_k_mask, ComponentLayout, Site, SparsityKinds, SubNetworkMask};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

use super::{
    AttentionParams, Architecture, BakedGates, CrossParams, FfnParams, GateValues, LayerParams,
    ModelConfig, Norm, ParamId, ParamStore, SparseModel, Transformer,
};

fn select_cols<T: Scalar>(t: &Tensor<T>, groups: &[usize], width: usize) -> Tensor<T> {
    let (rows, cols) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(rows * groups.len() * width);
    for r in 0..rows {
        for &grp in groups {
            data.extend_from_slice(&t.data[r * cols + grp * width..r * cols + (grp + 1) * width]);
        }
    }
    let shape = if t.shape.len() == 1 {
        vec![groups.len() * width]
    } else {
        vec![rows, groups.len() * width]
    };
    Tensor::new(shape, data).expect("non-empty selection")
}

fn select_rows<T: Scalar>(t: &Tensor<T>, groups: &[usize], width: usize) -> Tensor<T> {
    let cols = t.cols();
    let mut data = Vec::with_capacity(groups.len() * width * cols);
    for &grp in groups {
        data.extend_from_slice(&t.data[grp * width * cols..(grp + 1) * width * cols]);
    }
    Tensor::new(vec![groups.len() * width, cols], data).expect("non-empty selection")
}

struct Copier<'a, T> {
    src: &'a ParamStore<T>,
    dst: ParamStore<T>,
}

impl<T: Scalar> Copier<'_, T> {
    fn copy(&mut self, id: ParamId) -> ParamId {
        self.dst.add(self.src.names[id.0].clone(), self.src.get(id).clone())
    }

    fn derived(&mut self, id: ParamId, t: Tensor<T>) -> ParamId {
        self.dst.add(self.src.names[id.0].clone(), t)
    }

    fn norm(&mut self, n: &Norm) -> Norm {
        Norm {
            gain: self.copy(n.gain),
            bias: self.copy(n.bias),
        }
    }

    fn attention(&mut self, p: &AttentionParams, keep: &[usize]) -> AttentionParams {
        let dh = p.head_dim;
        let mut cols = |w: ParamId| {
            let t = select_cols(self.src.get(w), keep, dh);
            self.derived(w, t)
        };
        let (wq, bq, wk, bk, wv, bv) = (
            cols(p.wq),
            cols(p.bq),
            cols(p.wk),
            cols(p.bk),
            cols(p.wv),
            cols(p.bv),
        );
        let wo = select_rows(self.src.get(p.wo), keep, dh);
        AttentionParams {
            heads: keep.len(),
            head_dim: dh,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo: self.derived(p.wo, wo),
            bo: self.copy(p.bo),
        }
    }

    fn ffn(&mut self, p: &FfnParams, keep: &[usize]) -> FfnParams {
        let w = p.block_width;
        let w1 = select_cols(self.src.get(p.w1), keep, w);
        let b1 = select_cols(self.src.get(p.b1), keep, w);
        let w2 = select_rows(self.src.get(p.w2), keep, w);
        FfnParams {
            blocks: keep.len(),
            block_width: w,
            w1: self.derived(p.w1, w1),
            b1: self.derived(p.b1, b1),
            w2: self.derived(p.w2, w2),
            b2: self.copy(p.b2),
        }
    }
}

/// Kept indices and their score values for one gated category.
fn kept(slot: Option<usize>, n: usize, bits: &[bool], scores: &[f64]) -> (Vec<usize>, Option<Vec<f64>>) {
    match slot {
        Some(o) => {
            let idx: Vec<usize> = (0..n).filter(|&i| bits[o + i]).collect();
            let vals = idx.iter().map(|&i| scores[o + i]).collect();
            (idx, Some(vals))
        }
        None => ((0..n).collect(), None),
    }
}

fn extract_stack<T: Scalar>(
    cp: &mut Copier<'_, T>,
    layers: &[LayerParams],
    layout: &ComponentLayout,
    bits: &[bool],
    scores: &[f64],
) -> (Vec<LayerParams>, Vec<GateValues>) {
    let mut out = Vec::new();
    let mut gates = Vec::new();
    for (r, layer) in layers.iter().enumerate() {
        let s = layout.slots(r);
        if let Some(o) = s.layer {
            if !bits[o] {
                continue;
            }
        }
        let (heads, head_vals) = kept(s.heads, layout.heads, bits, scores);
        let (cross_heads, cross_vals) = kept(s.cross, layout.heads, bits, scores);
        let (blocks, block_vals) = kept(s.blocks, layout.blocks, bits, scores);
        let norm_attn = cp.norm(&layer.norm_attn);
        let self_attn = cp.attention(&layer.self_attn, &heads);
        let cross = layer.cross.as_ref().map(|c| CrossParams {
            norm: cp.norm(&c.norm),
            attn: cp.attention(&c.attn, &cross_heads),
        });
        let norm_ffn = cp.norm(&layer.norm_ffn);
        let ffn = cp.ffn(&layer.ffn, &blocks);
        out.push(LayerParams {
            index: layer.index,
            norm_attn,
            self_attn,
            cross,
            norm_ffn,
            ffn,
        });
        gates.push(GateValues {
            gamma: s.layer.map(|o| scores[o]),
            heads: head_vals,
            cross: cross_vals.filter(|_| layer.cross.is_some()),
            blocks: block_vals,
        });
    }
    (out, gates)
}

fn slice<T: Scalar>(
    net: &Transformer<T>,
    layouts: [&ComponentLayout; 2],
    bits: [&[bool]; 2],
    scores: [&[f64]; 2],
) -> Result<(Transformer<T>, Vec<GateValues>, Vec<GateValues>)> {
    if net.arch.encoder.len() != layouts[0].layers || net.arch.decoder.len() != layouts[1].layers {
        return Err(Error::config("mask layout does not match model depth"));
    }
    let mut cp = Copier {
        src: &net.params,
        dst: ParamStore::default(),
    };
    let embed = cp.copy(net.arch.embed);
    let out_proj = net.arch.out_proj.map(|p| cp.copy(p));
    let lang_embed = net.arch.lang_embed.map(|p| cp.copy(p));
    let (encoder, enc_gates) = extract_stack(&mut cp, &net.arch.encoder, layouts[0], bits[0], scores[0]);
    let (decoder, dec_gates) = extract_stack(&mut cp, &net.arch.decoder, layouts[1], bits[1], scores[1]);
    let enc_norm = cp.norm(&net.arch.enc_norm);
    let dec_norm = cp.norm(&net.arch.dec_norm);
    let small = Transformer {
        config: net.config.clone(),
        languages: net.languages.clone(),
        arch: Architecture {
            embed,
            out_proj,
            lang_embed,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
        },
        params: cp.dst,
        baked: None,
    };
    Ok((small, enc_gates, dec_gates))
}

/// Physically smaller model for one language pair: unselected layers, head
/// projections and FFN blocks are removed, and the surviving evaluation-mode
/// scores are kept as constant multipliers so that the result computes the
/// same function as the hard-masked full model.
pub fn extract_subnetwork<T: Scalar>(
    model: &SparseModel<T>,
    mask: &SubNetworkMask,
    src_lang: &str,
    tgt_lang: &str,
) -> Result<Transformer<T>> {
    let table = &model.scores;
    mask.check_budgets(&table.encoder, &table.decoder)?;
    let enc_bits = &mask.get(src_lang)?.encoder;
    let dec_bits = &mask.get(tgt_lang)?.decoder;
    let enc_scores = table.sample_scores(src_lang, Site::Encoder, None)?;
    let dec_scores = table.sample_scores(tgt_lang, Site::Decoder, None)?;
    let (mut small, encoder, decoder) = slice(
        &model.net,
        [&table.encoder, &table.decoder],
        [enc_bits, dec_bits],
        [&enc_scores, &dec_scores],
    )?;
    small.baked = Some(BakedGates {
        src_lang: src_lang.to_string(),
        tgt_lang: tgt_lang.to_string(),
        encoder,
        decoder,
    });
    Ok(small)
}

/// Ungated model whose every layer has the budgeted numbers of heads and FFN
/// blocks and whose stacks have the budgeted depths: the dense architecture a
/// sparse model's sub-networks activate. Built by slicing a freshly
/// initialized full model.
pub fn dense_active_architecture<T: Scalar>(
    config: ModelConfig,
    languages: Vec<String>,
    seed: u64,
) -> Result<Transformer<T>> {
    let full = Transformer::<T>::new(config.clone(), languages, seed)?;
    let layout = |site| {
        ComponentLayout::new(site, config.layers(site), config.heads, config.blocks, SparsityKinds::ALL)
    };
    let (enc, dec) = (layout(Site::Encoder), layout(Site::Decoder));
    let (enc_ones, dec_ones) = (vec![1.0; enc.len()], vec![1.0; dec.len()]);
    let enc_bits = top_k_mask(&enc, &enc_ones, &config.budgets)?;
    let dec_bits = top_k_mask(&dec, &dec_ones, &config.budgets)?;
    let (small, _, _) = slice(&full, [&enc, &dec], [&enc_bits, &dec_bits], [&enc_ones, &dec_ones])?;
    Ok(small)
}
