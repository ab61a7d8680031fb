//! Decoding, BLEU, throughput and parameter accounting.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::gating::{Site, SubNetworkMask};
use crate::model::{
    extract_subnetwork, gates_from_scores, Ctx, GateMode, LayerGates, SeqBatch, SparseModel, Transformer, BOS, EOS,
    PAD,
};
use crate::tensor::{Graph, Scalar, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    /// 1 means greedy search.
    pub beam: usize,
    pub length_penalty: f64,
    /// Generated tokens per sentence, end token included.
    pub max_output: usize,
    /// Add-one smoothing of higher-order BLEU precisions.
    #[serde(default)]
    pub smooth_bleu: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 1,
            length_penalty: 1.0,
            max_output: 15,
            smooth_bleu: false,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_output: usize) -> Self {
        DecodeConfig {
            max_output,
            ..Self::default()
        }
    }

    pub fn beam(beam: usize, length_penalty: f64, max_output: usize) -> Self {
        DecodeConfig {
            beam,
            length_penalty,
            max_output,
            smooth_bleu: false,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.beam == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::config("beam size must be at least 1"));
        }
        if self.max_output == 0 {
            return Err(Error::config("max_output must be positive"));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::config("length penalty must be finite"));
        }
        Ok(())
    }
}

/// Which gate values a decoding network uses.
#[derive(Clone, Debug, PartialEq)]
pub enum Gating {
    /// The network's own gates: none for a dense model, baked constants for
    /// an extracted one.
    Own,
    Scores {
        enc: Option<Vec<f64>>,
        dec: Option<Vec<f64>>,
    },
}

/// A network ready to translate one language pair.
#[derive(Clone, Debug)]
pub struct Prepared<'a, T: Scalar> {
    pub net: Cow<'a, Transformer<T>>,
    pub gating: Gating,
    pub src_lang: String,
    pub tgt_lang: String,
}

/// The model variants that can be evaluated.
#[derive(Clone, Copy, Debug)]
pub enum Variant<'a, T: Scalar> {
    Dense(&'a Transformer<T>),
    Gated(&'a SparseModel<T>, GateMode),
    Extracted(&'a SparseModel<T>, &'a SubNetworkMask),
}

impl<'a, T: Scalar> Variant<'a, T> {
    pub fn prepare(&self, src_lang: &str, tgt_lang: &str) -> Result<Prepared<'a, T>> {
        let (net, gating) = match *self {
            Variant::Dense(t) => {
                t.language_index(src_lang)?;
                t.language_index(tgt_lang)?;
                if let Some(b) = &t.baked {
                    if b.src_lang != src_lang || b.tgt_lang != tgt_lang {
                        return Err(Error::input(format!(
                            "sub-network for {}-{} cannot translate {src_lang}-{tgt_lang}",
                            b.src_lang, b.tgt_lang
                        )));
                    }
                }
                (Cow::Borrowed(t), Gating::Own)
            }
            Variant::Gated(m, mode) => (
                Cow::Borrowed(&m.net),
                Gating::Scores {
                    enc: m.site_scores(src_lang, Site::Encoder, mode)?,
                    dec: m.site_scores(tgt_lang, Site::Decoder, mode)?,
                },
            ),
            Variant::Extracted(m, mask) => (
                Cow::Owned(extract_subnetwork(m, mask, src_lang, tgt_lang)?),
                Gating::Own,
            ),
        };
        Ok(Prepared {
            net,
            gating,
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeOutput {
    /// Generated content tokens, end token stripped.
    pub tokens: Vec<Vec<usize>>,
    /// Generated non-pad positions, end tokens included.
    pub generated: usize,
}

struct Session<'p, 'a, T: Scalar> {
    p: &'p Prepared<'a, T>,
    g: Graph<T>,
    bound: crate::model::Bound,
    enc: Vec<LayerGates>,
    dec: Vec<LayerGates>,
    src_lang: usize,
    tgt_lang: usize,
}

impl<'p, 'a, T: Scalar> Session<'p, 'a, T> {
    fn new(p: &'p Prepared<'a, T>) -> Result<Self> {
        let net = &*p.net;
        let mut g = Graph::new();
        let bound = net.params.bind(&mut g, false);
        let (enc, dec) = match &p.gating {
            Gating::Own => net.own_gates(&mut g)?,
            Gating::Scores { enc, dec } => {
                let mut site = |s: &Option<Vec<f64>>, site: Site, n: usize| -> Result<Vec<LayerGates>> {
                    match s {
                        Some(v) => {
                            let var = g.constant(vec![v.len()], v.iter().map(|&x| T::of(x)).collect())?;
                            gates_from_scores(&mut g, &net.config.layout(site), var)
                        }
                        None => Ok(vec![LayerGates::default(); n]),
                    }
                };
                (
                    site(enc, Site::Encoder, net.arch.encoder.len())?,
                    site(dec, Site::Decoder, net.arch.decoder.len())?,
                )
            }
        };
        Ok(Session {
            src_lang: net.language_index(&p.src_lang)?,
            tgt_lang: net.language_index(&p.tgt_lang)?,
            p,
            g,
            bound,
            enc,
            dec,
        })
    }

    fn encode(&mut self, src: &SeqBatch) -> Result<Var> {
        let mut ctx = Ctx::new(&mut self.g, &self.bound);
        self.p.net.encode(&mut ctx, src, self.src_lang, &self.enc)
    }

    /// Log-probabilities of the next token after each prefix.
    fn next_log_probs(&mut self, memory: Var, src: &SeqBatch, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let tgt_in = SeqBatch::new(prefixes)?;
        let mut ctx = Ctx::new(&mut self.g, &self.bound);
        let logits = self.p.net.decode(&mut ctx, memory, src, &tgt_in, self.tgt_lang, &self.dec)?;
        let v = self.g.value(logits).cols();
        let data = self.g.data(logits);
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(b, pre)| {
                log_softmax(&data[(b * tgt_in.len + pre.len() - 1) * v..][..v])
            })
            .collect())
    }
}

fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let row: Vec<f64> = row.iter().map(|x| x.to_f64_lossy()).collect();
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.into_iter().map(|x| x - lse).collect()
}

fn source_batch(srcs: &[Vec<usize>]) -> Result<SeqBatch> {
    let with_eos: Vec<Vec<usize>> = srcs.iter().map(|s| [s.as_slice(), &[EOS]].concat()).collect();
    SeqBatch::new(&with_eos)
}

/// Best next token; padding and the start token are never generated.
fn argmax(xs: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &x) in xs.iter().enumerate().skip(EOS) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn output_limit<T: Scalar>(p: &Prepared<'_, T>, cfg: &DecodeConfig) -> usize {
    cfg.max_output.min(p.net.config.max_len - 1)
}

/// Greedy decoding of a batch of sources (content tokens, no end token).
pub fn greedy<T: Scalar>(p: &Prepared<'_, T>, srcs: &[Vec<usize>], cfg: &DecodeConfig) -> Result<DecodeOutput> {
    let mut s = Session::new(p)?;
    let src = source_batch(srcs)?;
    let memory = s.encode(&src)?;
    let mut prefixes = vec![vec![BOS]; srcs.len()];
    let mut done = vec![false; srcs.len()];
    let mut generated = 0;
    for _ in 0..output_limit(p, cfg) {
        if done.iter().all(|&d| d) {
            break;
        }
        let lp = s.next_log_probs(memory, &src, &prefixes)?;
        for (b, pre) in prefixes.iter_mut().enumerate() {
            if done[b] {
                pre.push(PAD);
                continue;
            }
            let tok = argmax(&lp[b]);
            pre.push(tok);
            generated += 1;
            done[b] = tok == EOS;
        }
    }
    let tokens = prefixes
        .into_iter()
        .map(|pre| pre[1..].iter().copied().take_while(|&t| t != EOS && t != PAD).collect())
        .collect();
    Ok(DecodeOutput { tokens, generated })
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
}

fn normalized(logp: f64, len: usize, penalty: f64) -> f64 {
    logp / (len as f64).powf(penalty)
}

/// Beam search for one source sentence. Finished hypotheses are ranked by
/// `log p / length^penalty`.
fn beam_one<T: Scalar>(p: &Prepared<'_, T>, src: &[usize], cfg: &DecodeConfig) -> Result<(Vec<usize>, usize)> {
    let k = cfg.beam.max(1);
    let mut s = Session::new(p)?;
    let srcs = vec![src.to_vec(); k];
    let src_b = source_batch(&srcs)?;
    let memory = s.encode(&src_b)?;
    let mut alive = vec![Hyp {
        tokens: vec![BOS],
        logp: 0.0,
    }];
    let mut finished: Vec<(f64, Hyp)> = Vec::new();
    let limit = output_limit(p, cfg);
    for step in 0..limit {
        let mut prefixes: Vec<Vec<usize>> = alive.iter().map(|h| h.tokens.clone()).collect();
        // Memory was encoded for exactly k copies of the source.
        while prefixes.len() < k {
            prefixes.push(prefixes[0].clone());
        }
        let lp = s.next_log_probs(memory, &src_b, &prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, h) in alive.iter().enumerate() {
            for (tok, &l) in lp[hi].iter().enumerate() {
                if tok == PAD || tok == BOS {
                    continue;
                }
                cands.push((h.logp + l, hi, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        for (logp, hi, tok) in cands {
            if next.len() >= k || finished.len() >= k {
                break;
            }
            let mut tokens = alive[hi].tokens.clone();
            tokens.push(tok);
            let h = Hyp { tokens, logp };
            if tok == EOS || step + 1 == limit {
                let len = h.tokens.len() - 1;
                finished.push((normalized(logp, len, cfg.length_penalty), h));
            } else {
                next.push(h);
            }
        }
        if finished.len() >= k || next.is_empty() {
            break;
        }
        alive = next;
    }
    let best = finished
        .into_iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.0.total_cmp(&b.0).then(ib.cmp(ia)))
        .map(|(_, (_, h))| h)
        .ok_or_else(|| Error::input("beam search produced no hypothesis"))?;
    let generated = best.tokens.len() - 1;
    let out = best.tokens[1..].iter().copied().take_while(|&t| t != EOS).collect();
    Ok((out, generated))
}

/// Beam search for each source independently. A beam of one reproduces
/// greedy decoding.
pub fn beam_search<T: Scalar>(p: &Prepared<'_, T>, srcs: &[Vec<usize>], cfg: &DecodeConfig) -> Result<DecodeOutput> {
    let mut tokens = Vec::with_capacity(srcs.len());
    let mut generated = 0;
    for s in srcs {
        let (t, n) = beam_one(p, s, cfg)?;
        tokens.push(t);
        generated += n;
    }
    Ok(DecodeOutput { tokens, generated })
}

/// Greedy or beam decoding according to `cfg`.
pub fn decode<T: Scalar>(p: &Prepared<'_, T>, srcs: &[Vec<usize>], cfg: &DecodeConfig) -> Result<DecodeOutput> {
    cfg.validate()?;
    if srcs.is_empty() {
        return Err(Error::input("nothing to decode"));
    }
    if cfg.is_greedy() {
        greedy(p, srcs, cfg)
    } else {
        beam_search(p, srcs, cfg)
    }
}

/// Log-probability of each output (end token appended) given its source.
pub fn score_outputs<T: Scalar>(p: &Prepared<'_, T>, srcs: &[Vec<usize>], outs: &[Vec<usize>]) -> Result<Vec<f64>> {
    if srcs.len() != outs.len() {
        return Err(Error::input("sources and outputs differ in number"));
    }
    let mut s = Session::new(p)?;
    let src = source_batch(srcs)?;
    let memory = s.encode(&src)?;
    let full: Vec<Vec<usize>> = outs.iter().map(|o| [&[BOS], o.as_slice()].concat()).collect();
    let tgt_in = SeqBatch::new(&full)?;
    let mut ctx = Ctx::new(&mut s.g, &s.bound);
    let logits = p.net.decode(&mut ctx, memory, &src, &tgt_in, s.tgt_lang, &s.dec)?;
    let v = s.g.value(logits).cols();
    let data = s.g.data(logits);
    Ok(outs
        .iter()
        .enumerate()
        .map(|(b, o)| {
            let mut total = 0.0;
            for (t, &tok) in o.iter().chain(std::iter::once(&EOS)).enumerate() {
                total += log_softmax(&data[(b * tgt_in.len + t) * v..][..v])[tok];
            }
            total
        })
        .collect())
}

fn ngram_counts<S: Eq + Hash + Clone>(xs: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut m = HashMap::new();
    if xs.len() >= n {
        for w in xs.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 in [0, 100]: geometric mean of clipped n-gram
/// precisions times the brevity penalty. `smooth` adds one to numerator and
/// denominator of the 2- to 4-gram precisions.
pub fn bleu<S: Eq + Hash + Clone>(hyps: &[Vec<S>], refs: &[Vec<S>], smooth: bool) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::input(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::input("BLEU of an empty corpus"));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let (m, t) = if smooth && n > 0 {
            (matches[n] as f64 + 1.0, totals[n] as f64 + 1.0)
        } else {
            (matches[n] as f64, totals[n] as f64)
        };
        if m == 0.0 || t == 0.0 {
            return Ok(0.0);
        }
        log_sum += (m / t).ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub median: f64,
    pub iqr: f64,
    pub tokens: usize,
    pub samples: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Tokens per wall-clock second of `run`, which decodes a fixed workload and
/// returns its generated token count. Median and interquartile range over
/// `repeats` timed runs after `warmup` untimed ones.
pub fn measure_throughput<F>(warmup: usize, repeats: usize, mut run: F) -> Result<Throughput>
where
    F: FnMut() -> Result<usize>,
{
    if warmup < 1 || repeats < 3 {
        return Err(Error::config("throughput needs warmup >= 1 and repeats >= 3"));
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(repeats);
    let mut tokens = 0;
    for _ in 0..repeats {
        let t0 = Instant::now();
        tokens = run()?;
        let secs = t0.elapsed().as_secs_f64().max(1e-9);
        samples.push(tokens as f64 / secs);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(Throughput {
        median: quantile(&sorted, 0.5),
        iqr: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
        tokens,
        samples,
    })
}

/// Decodes every source in `batches` once; the throughput workload.
pub fn decode_workload<T: Scalar>(p: &Prepared<'_, T>, batches: &[Vec<Vec<usize>>], cfg: &DecodeConfig) -> Result<usize> {
    if batches.is_empty() || batches.iter().any(|b| b.is_empty()) {
        return Err(Error::input("empty batch set"));
    }
    let mut n = 0;
    for b in batches {
        n += decode(p, b, cfg)?.generated;
    }
    Ok(n)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub active: usize,
    pub total: usize,
    pub by_category: BTreeMap<String, usize>,
}

fn category(name: &str) -> &'static str {
    if name == "embed" || name == "out_proj" || name == "lang_embed" {
        "embedding"
    } else if name.contains("norm") {
        "norm"
    } else if name.contains("attn") {
        "attention"
    } else {
        "ffn"
    }
}

fn stored_params<T: Scalar>(net: &Transformer<T>, include_embeddings: bool) -> (usize, BTreeMap<String, usize>) {
    let mut by = BTreeMap::new();
    let mut total = 0;
    for (name, t) in net.params.names.iter().zip(&net.params.tensors) {
        let c = category(name);
        if c == "embedding" && !include_embeddings {
            continue;
        }
        *by.entry(c.to_string()).or_insert(0) += t.numel();
        total += t.numel();
    }
    (total, by)
}

/// All stored parameters of a dense or extracted network are active.
pub fn count_params<T: Scalar>(net: &Transformer<T>, include_embeddings: bool) -> ParamCount {
    let (total, by_category) = stored_params(net, include_embeddings);
    ParamCount {
        active: total,
        total,
        by_category,
    }
}

/// Active parameters of one language pair's sub-network against every stored
/// network parameter. Selection logits are not counted.
pub fn count_params_sparse<T: Scalar>(
    model: &SparseModel<T>,
    mask: &SubNetworkMask,
    src_lang: &str,
    tgt_lang: &str,
    include_embeddings: bool,
) -> Result<ParamCount> {
    let small = extract_subnetwork(model, mask, src_lang, tgt_lang)?;
    let (active, by_category) = stored_params(&small, include_embeddings);
    let (total, _) = stored_params(&model.net, include_embeddings);
    Ok(ParamCount {
        active,
        total,
        by_category,
    })
}

/// Parameters of an ungated network with the given depths and per-layer
/// head and block counts.
pub fn closed_form_params(
    config: &crate::model::ModelConfig,
    depths: (usize, usize),
    heads: usize,
    blocks: usize,
    languages: usize,
    include_embeddings: bool,
) -> usize {
    let d = config.d;
    let hw = heads * config.head_dim();
    let fw = blocks * config.block_width();
    let norm = 2 * d;
    let attn = 4 * d * hw + 3 * hw + d;
    let ffn = 2 * d * fw + fw + d;
    let enc = 2 * norm + attn + ffn;
    let dec = enc + norm + attn;
    let mut n = depths.0 * enc + depths.1 * dec + 2 * norm;
    if include_embeddings {
        n += config.vocab_size * d;
        if !config.tie_embeddings {
            n += d * config.vocab_size;
        }
        if config.language_embeddings {
            n += languages * d;
        }
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    pub src: String,
    pub tgt: String,
    pub zero_shot: bool,
    pub bleu: f64,
    pub sentences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub split: Split,
    pub directions: Vec<DirectionScore>,
    /// Mean BLEU per task: `all`, `supervised`, `zero-shot`, and with a hub
    /// language `o2m` (out of the hub) and `m2o` (into it).
    pub averages: BTreeMap<String, f64>,
    pub params: ParamCount,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub throughput: Option<Throughput>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Task averages over direction scores; empty tasks are absent.
pub fn task_averages(dirs: &[DirectionScore], hub: Option<&str>) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let mut put = |name: &str, f: &dyn Fn(&DirectionScore) -> bool| {
        let xs: Vec<f64> = dirs.iter().filter(|d| f(d)).map(|d| d.bleu).collect();
        if let Some(m) = mean(&xs) {
            out.insert(name.to_string(), m);
        }
    };
    put("all", &|_| true);
    put("supervised", &|d| !d.zero_shot);
    put("zero-shot", &|d| d.zero_shot);
    if let Some(h) = hub {
        put("o2m", &|d| !d.zero_shot && d.src == h);
        put("m2o", &|d| !d.zero_shot && d.tgt == h);
    }
    out
}

/// BLEU of `variant` on every direction's `split`, decoding `chunk`
/// sentences at a time.
pub fn evaluate<T: Scalar>(
    label: &str,
    variant: &Variant<'_, T>,
    corpus: &Corpus,
    split: Split,
    cfg: &DecodeConfig,
    params: ParamCount,
) -> Result<EvalReport> {
    evaluate_parallel(label, variant, corpus, split, cfg, params, 1)
}

fn score_direction<T: Scalar>(
    variant: &Variant<'_, T>,
    d: &crate::corpus::Direction,
    split: Split,
    cfg: &DecodeConfig,
) -> Result<DirectionScore> {
    let pairs = d.split(split);
    let p = variant.prepare(&d.src, &d.tgt)?;
    let mut hyps = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let srcs: Vec<Vec<usize>> = chunk.iter().map(|q| q.src.clone()).collect();
        hyps.extend(decode(&p, &srcs, cfg)?.tokens);
    }
    let refs: Vec<Vec<usize>> = pairs.iter().map(|q| q.tgt.clone()).collect();
    Ok(DirectionScore {
        src: d.src.clone(),
        tgt: d.tgt.clone(),
        zero_shot: d.zero_shot,
        bleu: bleu(&hyps, &refs, cfg.smooth_bleu)?,
        sentences: pairs.len(),
    })
}

/// [`evaluate`] with directions decoded on up to `threads` workers. The
/// report does not depend on the worker count.
pub fn evaluate_parallel<T: Scalar>(
    label: &str,
    variant: &Variant<'_, T>,
    corpus: &Corpus,
    split: Split,
    cfg: &DecodeConfig,
    params: ParamCount,
    threads: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    let dirs: Vec<_> = corpus.directions.iter().filter(|d| !d.split(split).is_empty()).collect();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<DirectionScore>>>> = Mutex::new((0..dirs.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(d) = dirs.get(i) else { break };
        let r = score_direction(variant, d, split, cfg);
        slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
    };
    let workers = threads.clamp(1, dirs.len().max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    let directions = slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(Error::input("direction was not evaluated"))))
        .collect::<Result<Vec<_>>>()?;
    let averages = task_averages(&directions, None);
    Ok(EvalReport {
        model: label.to_string(),
        split,
        directions,
        averages,
        params,
        throughput: None,
    })
}

/// Fixed-width table with one row per report: parameters in millions with
/// the total in parentheses, decoding speed and average BLEU.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<24} {:>20} {:>16} {:>8}", "Model", "#Params(M)", "Decode (tok/s)", "BLEU");
    let _ = writeln!(s, "{}", "-".repeat(71));
    for r in reports {
        let params = format!(
            "{:.3} ({:.3})",
            r.params.active as f64 / 1e6,
            r.params.total as f64 / 1e6
        );
        let speed = r
            .throughput
            .as_ref()
            .map_or_else(|| "-".to_string(), |t| format!("{:.0}", t.median));
        let b = r.averages.get("all").copied().unwrap_or(0.0);
        let _ = writeln!(s, "{:<24} {:>20} {:>16} {:>8.2}", r.model, params, speed, b);
    }
    s
}
