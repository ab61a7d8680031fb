//! Self-check suites shared by the `verify` command and the acceptance run.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::gating::{Budgets, SparsityKinds, SubNetworkMask};
use crate::model::{
    extract_subnetwork, layer_forward, AttnShape, Ctx, GateMode, LayerGates, ModelConfig, SeqBatch, SparseModel,
};
use crate::objectives::*;
use crate::tensor::gradcheck::check;
use crate::tensor::{Graph, Scalar, Tensor};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn config(sparsity: SparsityKinds) -> ModelConfig {
    ModelConfig {
        d: 8,
        d_ff: 16,
        heads: 2,
        blocks: 4,
        enc_layers: 2,
        dec_layers: 3,
        vocab_size: 11,
        max_len: 12,
        dropout: 0.0,
        budgets: Budgets {
            enc_layers: 1,
            dec_layers: 2,
            heads: 1,
            blocks: 2,
        },
        sparsity,
        tie_embeddings: true,
        language_embeddings: true,
        ln_eps: 1e-5,
    }
}

fn langs() -> Vec<String> {
    vec!["aa".into(), "bb".into(), "cc".into()]
}

fn jitter<T: Scalar>(m: &mut SparseModel<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in &mut m.net.params.tensors {
        for x in &mut t.data {
            *x = T::of(x.to_f64_lossy() + rng.gen_range(-0.3..0.3));
        }
    }
    for row in m.scores.mu_encoder.iter_mut().chain(m.scores.mu_decoder.iter_mut()) {
        for x in row {
            *x = T::of(rng.gen_range(-3.0..3.0));
        }
    }
}

fn batch(seed: u64, vocab: usize) -> Result<(SeqBatch, SeqBatch, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = |n: usize| -> Vec<usize> { (0..n).map(|_| rng.gen_range(3..vocab)).collect() };
    let src = vec![seq(5), seq(3)];
    let body = [seq(4), seq(2)];
    let tgt_in: Vec<Vec<usize>> = body.iter().map(|b| [vec![1], b.clone()].concat()).collect();
    let tgt_out: Vec<Vec<usize>> = body.iter().map(|b| [b.clone(), vec![2]].concat()).collect();
    Ok((SeqBatch::new(&src)?, SeqBatch::new(&tgt_in)?, SeqBatch::new(&tgt_out)?.tokens))
}

/// Central differences against the tape on a gated model and the auxiliary
/// losses, all in f64.
pub fn gradients(tol: f64) -> Result<Check> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut m = SparseModel::<f64>::new(config(SparsityKinds::ALL), langs(), seed)?;
        jitter(&mut m, seed + 11);
        let (src, tgt_in, targets) = batch(seed, 11)?;
        let a = &m.net.arch;
        let ids = [
            a.decoder[0].ffn.w1,
            a.encoder[1].self_attn.wq,
            a.decoder[2].cross.as_ref().map_or(a.decoder[2].self_attn.wk, |c| c.attn.wv),
            a.lang_embed.unwrap_or(a.embed),
            a.encoder[0].norm_ffn.gain,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scores =
            |n: usize| Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(0.2..0.9)).collect::<Vec<f64>>());
        let mut inputs = vec![scores(m.scores.encoder.len())?, scores(m.scores.decoder.len())?];
        inputs.extend(ids.iter().map(|&id| m.net.params.get(id).clone()));
        let res = check(&inputs, 1e-5, |g, v| {
            let mut bound = m.net.params.bind(g, false);
            for (k, id) in ids.iter().enumerate() {
                bound.0[id.0] = v[k + 2];
            }
            let mut ctx = Ctx::new(g, &bound);
            let (_, logits) = m.forward(&mut ctx, &src, &tgt_in, "bb", "cc", Some(v[0]), Some(v[1]))?;
            g.cross_entropy(logits, &targets, 0)
        })?;
        worst = worst.max(res.max_error());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs: Vec<Tensor<f64>> = (0..3)
        .map(|_| Tensor::new(vec![5], (0..5).map(|_| rng.gen_range(0.05..0.95)).collect()))
        .collect::<Result<_>>()?;
    let masks: Vec<Vec<bool>> = (0..3).map(|l| (0..5).map(|i| (i + l) % 2 == 0).collect()).collect();
    for which in 0..3 {
        let res = check(&inputs, 1e-6, |g, v| match which {
            0 => sparsity_on_graph(g, v),
            1 => disparity_on_graph(g, v),
            _ => topk_on_graph(g, v, &masks),
        })?;
        worst = worst.max(res.max_error());
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Check::new(
        "finite-difference gradients",
        worst <= tol && secs < 120.0,
        format!("max relative error {worst:.2e} (tol {tol:.0e}) in {secs:.1}s"),
    ))
}

fn layer_with_gamma(gamma: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut m = SparseModel::<f64>::new(config(SparsityKinds::ALL), langs(), seed)?;
    jitter(&mut m, seed);
    let layer = m.net.arch.decoder[1].clone();
    let mut g = Graph::<f64>::new();
    let bound = m.net.params.bind(&mut g, false);
    let (src, tgt_in, _) = batch(seed, 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u_data: Vec<f64> = (0..tgt_in.rows() * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mem_data: Vec<f64> = (0..src.rows() * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let u = g.constant(vec![tgt_in.rows(), 8], u_data.clone())?;
    let mem = g.constant(vec![src.rows(), 8], mem_data)?;
    let self_shape = AttnShape {
        batch: 2,
        q_len: tgt_in.len,
        k_len: tgt_in.len,
        key_lengths: &tgt_in.lengths,
        causal: true,
    };
    let cross_shape = AttnShape {
        batch: 2,
        q_len: tgt_in.len,
        k_len: src.len,
        key_lengths: &src.lengths,
        causal: false,
    };
    let mut ctx = Ctx::new(&mut g, &bound);
    let cross = Some((mem, &cross_shape));
    let plain = layer_forward(&mut ctx, &layer, u, &self_shape, cross, &LayerGates::default(), 1e-5)?;
    let gv = ctx.g.constant(vec![1], vec![gamma])?;
    let gates = LayerGates {
        gamma: Some(gv),
        ..LayerGates::default()
    };
    let gated = layer_forward(&mut ctx, &layer, u, &self_shape, cross, &gates, 1e-5)?;
    Ok((u_data, g.data(plain).to_vec(), g.data(gated).to_vec()))
}

/// All-ones scores against the ungated network, and a zero layer score
/// against the identity, both compared bit for bit.
pub fn gating_identities(seeds: u64) -> Result<Check> {
    let mut ones_ok = true;
    let mut identity_ok = true;
    for seed in 0..seeds {
        let mut m = SparseModel::<f32>::new(config(SparsityKinds::ALL), langs(), seed)?;
        jitter(&mut m, seed + 100);
        let (src, tgt_in, _) = batch(seed, 11)?;
        let ones_e = vec![1.0; m.scores.encoder.len()];
        let ones_d = vec![1.0; m.scores.decoder.len()];
        let gated = m.logits_with_scores(&src, &tgt_in, ("aa", "cc"), Some(&ones_e), Some(&ones_d))?;
        let plain = m.net.logits(&src, &tgt_in, ("aa", "cc"))?;
        ones_ok &= gated.data == plain.data;
        let (u, _, out) = layer_with_gamma(0.0, seed)?;
        identity_ok &= u == out;
    }
    Ok(Check::new(
        "gating identities",
        ones_ok && identity_ok,
        format!("all-ones bit-exact: {ones_ok}, zero layer score identity: {identity_ok} ({seeds} seeds)"),
    ))
}

fn extraction_error(kinds: SparsityKinds, cases: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let names = langs();
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let mut cfg = config(kinds);
        cfg.budgets = Budgets {
            enc_layers: rng.gen_range(1..=2),
            dec_layers: rng.gen_range(1..=3),
            heads: rng.gen_range(1..=2),
            blocks: rng.gen_range(1..=4),
        };
        let mut m = SparseModel::<f64>::new(cfg.clone(), names.clone(), case)?;
        jitter(&mut m, case + 1000);
        let mask = SubNetworkMask::from_table(&m.scores, cfg.budgets)?;
        let src_lang = &names[rng.gen_range(0..3)];
        let tgt_lang = &names[rng.gen_range(0..3)];
        let (src, tgt_in, _) = batch(case, 11)?;
        let small = extract_subnetwork(&m, &mask, src_lang, tgt_lang)?;
        let hard = m.logits(&src, &tgt_in, (src_lang, tgt_lang), GateMode::Hard)?;
        let compact = small.logits(&src, &tgt_in, (src_lang, tgt_lang))?;
        let diff = hard
            .data
            .iter()
            .zip(&compact.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    Ok(worst)
}

/// Hard-masked full models against physically sliced sub-networks.
pub fn slice_equivalence(cases: u64) -> Result<Check> {
    let heads = extraction_error(
        SparsityKinds {
            head: true,
            ffn: false,
            layer: false,
        },
        cases,
    )?;
    let blocks = extraction_error(
        SparsityKinds {
            head: false,
            ffn: true,
            layer: false,
        },
        cases,
    )?;
    let all = extraction_error(SparsityKinds::ALL, cases)?;
    let worst = heads.max(blocks).max(all);
    Ok(Check::new(
        "slice equivalence",
        worst <= 1e-6,
        format!("max |diff| heads {heads:.1e}, blocks {blocks:.1e}, all kinds {all:.1e} ({cases} cases each)"),
    ))
}

/// Hand-computed loss values and phase totals.
pub fn loss_values() -> Result<Check> {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let s = 0.8f64;
    let ls = s * (s.ln() - 0.5f64.ln()) + 0.25 * (0.25f64.ln() - 0.5f64.ln());
    let three = [vec![0.5, 1.0], vec![0.2, 0.4], vec![1.0, 0.0]];
    let c = Coefficients::default();
    let p1 = phase_loss(Phase::One, 2.0, 3.0, 0.0, 0.0, c);
    let p2 = phase_loss(Phase::Two, 2.0, 123.0, 1.0, 0.5, c);
    let cases = [
        close(sparsity_loss(&[vec![0.5; 7]])?, 0.0),
        close(sparsity_loss(&[vec![1.0]])?, std::f64::consts::LN_2),
        close(sparsity_loss(&[vec![s], vec![0.25]])?, ls),
        close(disparity_loss(&[vec![1.0, 1.0], vec![1.0, 1.0]])?, 2.0),
        close(disparity_loss(&three)?, 1.2),
        close(topk_loss(&[vec![0.9, 0.2]], &[vec![1.0, 0.0]])?, 0.05),
        close(topk_loss(&[vec![0.5, 0.5]], &[vec![1.0, 0.0]])?, 0.5),
        (c.c_s, c.c_d, c.c_t) == (0.1, 0.02, 0.1),
        close(p1.total, 2.0 + c.c_s * 3.0) && p1.l_d == 0.0 && p1.l_t == 0.0,
        close(p2.total, 2.0 + c.c_d * 1.0 + c.c_t * 0.5) && p2.l_s == 0.0,
    ];
    let passed = cases.iter().filter(|&&b| b).count();
    Ok(Check::new(
        "loss values",
        passed == cases.len(),
        format!("{passed}/{} hand values within 1e-12", cases.len()),
    ))
}

fn elbo_model(seed: u64, ffn: bool) -> Result<SparseModel<f64>> {
    let cfg = ModelConfig {
        d: 8,
        d_ff: 16,
        heads: 2,
        blocks: 2,
        enc_layers: 1,
        dec_layers: 1,
        vocab_size: 10,
        max_len: 10,
        dropout: 0.0,
        budgets: Budgets {
            enc_layers: 1,
            dec_layers: 1,
            heads: 1,
            blocks: 1,
        },
        sparsity: SparsityKinds {
            head: true,
            ffn,
            layer: true,
        },
        tie_embeddings: true,
        language_embeddings: true,
        ln_eps: 1e-5,
    };
    let mut m = SparseModel::new(cfg, vec!["p".into(), "q".into()], seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABC);
    for row in m.scores.mu_encoder.iter_mut().chain(m.scores.mu_decoder.iter_mut()) {
        for x in row {
            *x = rng.gen_range(-4.0..4.0);
        }
    }
    Ok(m)
}

/// The evidence lower bound against exact enumeration on random tiny models.
pub fn elbo_bound(instances: u64) -> Result<Check> {
    let mut held = 0;
    let mut widest = 0;
    let mut min_gap = f64::INFINITY;
    for seed in 0..instances {
        let m = elbo_model(seed / 4, seed % 10 == 0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(3..10)).collect();
        let tgt: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(3..10)).collect();
        let langs = if rng.gen_bool(0.5) { ("p", "q") } else { ("q", "p") };
        let r = verify_elbo_bound(&m, &src, &tgt, langs)?;
        widest = widest.max(r.components);
        min_gap = min_gap.min(r.gap());
        held += usize::from(r.holds);
    }
    Ok(Check::new(
        "evidence lower bound",
        held as u64 == instances,
        format!("{held}/{instances} instances, up to {widest} components, smallest gap {min_gap:.3e}"),
    ))
}

/// Every suite at its full size.
pub fn run_all() -> Result<Vec<Check>> {
    Ok(vec![
        gradients(1e-4)?,
        gating_identities(5)?,
        slice_equivalence(100)?,
        loss_values()?,
        elbo_bound(1000)?,
    ])
}
