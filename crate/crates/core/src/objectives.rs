//! Translation loss plus the auxiliary score losses, and an exhaustive check
//! of the evidence lower bound that motivates them.

use serde::{Deserialize, Serialize};

use crate::gating::Site;
use crate::model::{GateMode, SeqBatch, SparseModel, PAD};
use crate::tensor::{Graph, Scalar, Var};
use crate::{Error, Result};

pub const C_S: f64 = 0.1;
pub const C_D: f64 = 0.02;
pub const C_T: f64 = 0.1;

/// Largest component count [`verify_elbo`] will enumerate.
pub const MAX_ENUMERATION: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub c_s: f64,
    pub c_d: f64,
    pub c_t: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Coefficients {
            c_s: C_S,
            c_d: C_D,
            c_t: C_T,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Soft scores, sparsity loss.
    One,
    /// Hard-masked scores, disparity and top-k losses.
    Two,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub phase: Phase,
    pub l_cp: f64,
    pub l_s: f64,
    pub l_d: f64,
    pub l_t: f64,
    pub total: f64,
    pub coefficients: Coefficients,
}

/// Combines per-term losses for one phase. Terms the phase does not use are
/// reported as zero.
pub fn phase_loss(phase: Phase, l_cp: f64, l_s: f64, l_d: f64, l_t: f64, c: Coefficients) -> LossBreakdown {
    let (l_s, l_d, l_t) = match phase {
        Phase::One => (l_s, 0.0, 0.0),
        Phase::Two => (0.0, l_d, l_t),
    };
    LossBreakdown {
        phase,
        l_cp,
        l_s,
        l_d,
        l_t,
        total: l_cp + c.c_s * l_s + c.c_d * l_d + c.c_t * l_t,
        coefficients: c,
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: u8,
    pub l_cp: f64,
    pub l_s: f64,
    pub l_d: f64,
    pub l_t: f64,
    pub total: f64,
    /// `l_d` divided by the number of language pairs it sums over.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_d_per_pair: Option<f64>,
}

impl LogRecord {
    pub fn new(step: usize, b: &LossBreakdown, pairs: usize) -> Self {
        LogRecord {
            step,
            phase: b.phase.number(),
            l_cp: b.l_cp,
            l_s: b.l_s,
            l_d: b.l_d,
            l_t: b.l_t,
            total: b.total,
            l_d_per_pair: (b.phase == Phase::Two && pairs > 0).then(|| b.l_d / pairs as f64),
        }
    }
}

fn check_unit(s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::Domain(format!("score {s} outside [0, 1]")))
    }
}

fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// `Σ_l Σ_i s (log s − log 0.5)` with `0 log 0 = 0`.
pub fn sparsity_loss(scores: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for row in scores {
        for &s in row {
            check_unit(s)?;
            total += xlogx(s) + s * std::f64::consts::LN_2;
        }
    }
    Ok(total)
}

fn check_rectangular(scores: &[Vec<f64>]) -> Result<()> {
    if let Some(first) = scores.first() {
        if scores.iter().any(|r| r.len() != first.len()) {
            return Err(Error::config("score vectors of different lengths"));
        }
    }
    Ok(())
}

/// Sum of dot products over unordered language pairs.
pub fn disparity_loss(scores: &[Vec<f64>]) -> Result<f64> {
    check_rectangular(scores)?;
    let mut total = 0.0;
    for (l, a) in scores.iter().enumerate() {
        for b in &scores[l + 1..] {
            total += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    Ok(total)
}

/// `Σ_l Σ_i (s − m)²` against binary masks.
pub fn topk_loss(scores: &[Vec<f64>], masks: &[Vec<f64>]) -> Result<f64> {
    if scores.len() != masks.len() || scores.iter().zip(masks).any(|(s, m)| s.len() != m.len()) {
        return Err(Error::config("scores and masks index different components"));
    }
    let mut total = 0.0;
    for (s, m) in scores.iter().zip(masks) {
        for (&x, &b) in s.iter().zip(m) {
            if b != 0.0 && b != 1.0 {
                return Err(Error::Domain(format!("mask entry {b} is not binary")));
            }
            total += (x - b) * (x - b);
        }
    }
    Ok(total)
}

/// Number of unordered pairs among `n` languages.
pub fn language_pairs(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Tape version of [`sparsity_loss`].
pub fn sparsity_on_graph<T: Scalar>(g: &mut Graph<T>, scores: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(scores.len());
    for &s in scores {
        let xl = g.xlogx(s)?;
        let lin = g.scale(s, T::of(std::f64::consts::LN_2));
        let both = g.add(xl, lin)?;
        terms.push(g.sum(both));
    }
    sum_all(g, &terms)
}

/// Tape version of [`disparity_loss`].
pub fn disparity_on_graph<T: Scalar>(g: &mut Graph<T>, scores: &[Var]) -> Result<Var> {
    let mut terms = Vec::new();
    for (l, &a) in scores.iter().enumerate() {
        for &b in &scores[l + 1..] {
            let p = g.mul(a, b)?;
            terms.push(g.sum(p));
        }
    }
    sum_all(g, &terms)
}

/// Tape version of [`topk_loss`]; masks are constants.
pub fn topk_on_graph<T: Scalar>(g: &mut Graph<T>, scores: &[Var], masks: &[Vec<bool>]) -> Result<Var> {
    if scores.len() != masks.len() {
        return Err(Error::config("scores and masks index different components"));
    }
    let mut terms = Vec::with_capacity(scores.len());
    for (&s, m) in scores.iter().zip(masks) {
        let shape = g.shape(s).to_vec();
        let mv = g.constant(shape, m.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())?;
        let d = g.sub(s, mv)?;
        let sq = g.mul(d, d)?;
        terms.push(g.sum(sq));
    }
    sum_all(g, &terms)
}

fn sum_all<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = g.scalar_constant(T::zero());
    for &t in terms {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub components: usize,
    pub elbo: f64,
    pub exact_log_marginal: f64,
    pub holds: bool,
}

impl ElboReport {
    pub fn gap(&self) -> f64 {
        self.exact_log_marginal - self.elbo
    }
}

fn bernoulli_kl_to_half(q: f64) -> f64 {
    xlogx(q) + xlogx(1.0 - q) + std::f64::consts::LN_2
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact ELBO `E_q[log p(y|x,z)] − KL(q ‖ Bernoulli(0.5)^N)` and exact
/// `log Σ_z p(y|x,z) 2^{-N}` by enumerating every binary `z`.
pub fn verify_elbo<F>(q: &[f64], mut log_likelihood: F) -> Result<ElboReport>
where
    F: FnMut(&[bool]) -> Result<f64>,
{
    let n = q.len();
    if n > MAX_ENUMERATION {
        return Err(Error::EnumerationRefused {
            n,
            limit: MAX_ENUMERATION,
        });
    }
    for &p in q {
        check_unit(p)?;
    }
    let log_prior = -(n as f64) * std::f64::consts::LN_2;
    let mut expected = 0.0;
    let mut joint = Vec::with_capacity(1 << n);
    let mut z = vec![false; n];
    for bits in 0u32..(1 << n) {
        let mut qz = 1.0;
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = bits >> i & 1 == 1;
            qz *= if *zi { q[i] } else { 1.0 - q[i] };
        }
        let ll = log_likelihood(&z)?;
        if qz > 0.0 {
            expected += qz * ll;
        }
        joint.push(ll + log_prior);
    }
    let kl: f64 = q.iter().map(|&p| bernoulli_kl_to_half(p)).sum();
    let elbo = expected - kl;
    let exact_log_marginal = log_sum_exp(&joint);
    Ok(ElboReport {
        components: n,
        elbo,
        exact_log_marginal,
        holds: elbo <= exact_log_marginal + 1e-9,
    })
}

/// Sequence log-likelihood `log p(y | x, z)` where `z` switches the encoder
/// components of the source language and the decoder components of the
/// target language on (score 1) or off (score 0).
pub fn sequence_log_likelihood<T: Scalar>(
    model: &SparseModel<T>,
    src: &SeqBatch,
    tgt_in: &SeqBatch,
    tgt_out: &[usize],
    langs: (&str, &str),
    z: &[bool],
) -> Result<f64> {
    let ne = model.scores.encoder.len();
    if z.len() != ne + model.scores.decoder.len() {
        return Err(Error::config("assignment length does not match gated components"));
    }
    let as_scores = |bits: &[bool]| -> Vec<f64> { bits.iter().map(|&b| f64::from(u8::from(b))).collect() };
    let enc = as_scores(&z[..ne]);
    let dec = as_scores(&z[ne..]);
    let logits = model.logits_with_scores(
        src,
        tgt_in,
        langs,
        (ne > 0).then_some(enc.as_slice()),
        (z.len() > ne).then_some(dec.as_slice()),
    )?;
    let mut g = Graph::<T>::new();
    let lv = g.constant(logits.shape.clone(), logits.data)?;
    let ce = g.cross_entropy(lv, tgt_out, PAD)?;
    let tokens = tgt_out.iter().filter(|&&t| t != PAD).count();
    Ok(-g.item(ce).to_f64_lossy() * tokens as f64)
}

/// [`verify_elbo`] for a gated model on one sentence pair, with `q` taken
/// from the model's evaluation-mode scores.
pub fn verify_elbo_bound<T: Scalar>(
    model: &SparseModel<T>,
    src: &[usize],
    tgt: &[usize],
    langs: (&str, &str),
) -> Result<ElboReport> {
    let mut q = model.site_scores(langs.0, Site::Encoder, GateMode::Soft)?.unwrap_or_default();
    q.extend(model.site_scores(langs.1, Site::Decoder, GateMode::Soft)?.unwrap_or_default());
    let src_b = SeqBatch::new(&[src.to_vec()])?;
    let tgt_in = SeqBatch::new(&[[&[crate::model::BOS], tgt].concat()])?;
    let tgt_out = [tgt, &[crate::model::EOS]].concat();
    verify_elbo(&q, |z| sequence_log_likelihood(model, &src_b, &tgt_in, &tgt_out, langs, z))
}
