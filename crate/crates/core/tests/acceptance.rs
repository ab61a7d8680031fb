//! End-to-end acceptance run: one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use serde::Serialize;
use sparse_mt::analysis::selection_overlap;
use sparse_mt::config::{Preset, RunConfig};
use sparse_mt::corpus::{generate, Corpus, Split};
use sparse_mt::gating::SubNetworkMask;
use sparse_mt::inference::*;
use sparse_mt::model::{extract_subnetwork, SparseModel};
use sparse_mt::trainer::Trainer;
use sparse_mt::verify;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Serialize)]
struct SeedRun {
    seed: u64,
    sparse_bleu: f64,
    dense_bleu: f64,
    zero_shot_trained: f64,
    zero_shot_untrained: f64,
    within_family: Option<f64>,
    cross_family: Option<f64>,
    budgets_exact: bool,
    train_secs: f64,
}

struct Outcome {
    lines: Vec<String>,
    failed: usize,
}

impl Outcome {
    fn record(&mut self, id: usize, name: &str, passed: bool, detail: String) {
        let line = format!("{} C{id:<2} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push(line);
        self.failed += usize::from(!passed);
    }
}

fn zero_shot_bleu(report: &EvalReport) -> f64 {
    report.averages.get("zero-shot").copied().unwrap_or(0.0)
}

fn extracted_report(model: &SparseModel<f32>, corpus: &Corpus, dc: &DecodeConfig) -> EvalReport {
    let mask = SubNetworkMask::from_table(&model.scores, model.config().budgets).unwrap();
    evaluate("sparse", &Variant::Extracted(model, &mask), corpus, Split::Test, dc, ParamCount::default()).unwrap()
}

fn budgets_exact(model: &SparseModel<f32>, corpus: &Corpus) -> bool {
    let b = model.config().budgets;
    let Ok(mask) = SubNetworkMask::from_table(&model.scores, b) else {
        return false;
    };
    if mask.check_budgets(&model.scores.encoder, &model.scores.decoder).is_err() {
        return false;
    }
    corpus.directions.iter().all(|d| {
        let Ok(small) = extract_subnetwork(model, &mask, &d.src, &d.tgt) else {
            return false;
        };
        let a = &small.arch;
        a.encoder.len() == b.enc_layers
            && a.decoder.len() == b.dec_layers
            && a.encoder.iter().chain(&a.decoder).all(|l| {
                l.self_attn.heads == b.heads
                    && l.ffn.blocks == b.blocks
                    && l.cross.as_ref().is_none_or(|c| c.attn.heads == b.heads)
            })
    })
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut out = Outcome {
        lines: Vec::new(),
        failed: 0,
    };

    let suites = [
        (1, verify::gradients(1e-4)),
        (2, verify::gating_identities(5)),
        (3, verify::slice_equivalence(100)),
        (4, verify::loss_values()),
        (5, verify::elbo_bound(1000)),
    ];
    for (id, r) in suites {
        match r {
            Ok(c) => out.record(id, &c.name, c.passed, c.detail),
            Err(e) => out.record(id, "self-check", false, format!("error: {e}")),
        }
    }

    let base = RunConfig::preset(Preset::Desk);
    let corpus = generate(&base.data.corpus, base.data.seed).unwrap();
    let families: BTreeMap<String, String> =
        corpus.languages.iter().map(|l| (l.id.clone(), l.family.clone())).collect();
    let dc = base.eval.clone();
    let mut runs = Vec::new();
    let mut last_sparse = None;
    for &seed in &SEEDS {
        let t0 = Instant::now();
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        let untrained = Trainer::new(&cfg, &corpus).unwrap();
        let zero_shot_untrained = zero_shot_bleu(&extracted_report(&untrained.model, &corpus, &dc));
        let mut sparse = untrained;
        sparse.run(&corpus, None, |_| {}).unwrap();
        let mut dcfg = cfg.clone();
        dcfg.gating.enabled = false;
        let mut dense = Trainer::new(&dcfg, &corpus).unwrap();
        dense.run(&corpus, None, |_| {}).unwrap();
        let train_secs = t0.elapsed().as_secs_f64();

        let sr = extracted_report(&sparse.model, &corpus, &dc);
        let dr = evaluate("dense", &Variant::Dense(&dense.model.net), &corpus, Split::Test, &dc, ParamCount::default())
            .unwrap();
        let mask = SubNetworkMask::from_table(&sparse.model.scores, cfg.gating.budgets).unwrap();
        let s = &sparse.model.scores;
        let overlap = selection_overlap(&mask, &s.encoder, &s.decoder, &families).unwrap();
        let run = SeedRun {
            seed,
            sparse_bleu: sr.averages["all"],
            dense_bleu: dr.averages["all"],
            zero_shot_trained: zero_shot_bleu(&sr),
            zero_shot_untrained,
            within_family: overlap.within_family,
            cross_family: overlap.cross_family,
            budgets_exact: budgets_exact(&sparse.model, &corpus),
            train_secs,
        };
        eprintln!(
            "seed {seed}: sparse {:.2} dense {:.2} zero-shot {:.2} (untrained {:.2}) jaccard {:?}/{:?} in {:.0}s",
            run.sparse_bleu,
            run.dense_bleu,
            run.zero_shot_trained,
            run.zero_shot_untrained,
            run.within_family,
            run.cross_family,
            t0.elapsed().as_secs_f64()
        );
        runs.push(run);
        last_sparse = Some(sparse);
    }
    let experiment_secs = start.elapsed().as_secs_f64();

    let exact = runs.iter().filter(|r| r.budgets_exact).count();
    out.record(
        6,
        "budgets after phase two",
        exact == runs.len(),
        format!("{exact}/{} seeds select exactly D'=3 layers, H'=3 heads, K'=4 blocks", runs.len()),
    );

    let close = runs.iter().filter(|r| r.sparse_bleu >= r.dense_bleu - 0.5).count();
    let pairs: Vec<String> = runs.iter().map(|r| format!("{:.1}/{:.1}", r.sparse_bleu, r.dense_bleu)).collect();
    out.record(
        7,
        "desk experiment",
        close >= 4 && experiment_secs < 3600.0,
        format!(
            "sparse >= dense-0.5 in {close}/5 seeds (sparse/dense {}), {:.1} min",
            pairs.join(" "),
            experiment_secs / 60.0
        ),
    );

    let gains: Vec<f64> = runs.iter().map(|r| r.zero_shot_trained - r.zero_shot_untrained).collect();
    let ok = gains.iter().all(|&g| g >= 10.0);
    out.record(
        8,
        "zero-shot direction",
        ok,
        format!(
            "trained minus untrained BLEU {}",
            gains.iter().map(|g| format!("{g:.1}")).collect::<Vec<_>>().join(" ")
        ),
    );

    let sparse = last_sparse.unwrap();
    let m = &sparse.model;
    let mask = SubNetworkMask::from_table(&m.scores, m.config().budgets).unwrap();
    let d = corpus.directions.iter().find(|d| !d.zero_shot).unwrap();
    let batches: Vec<Vec<Vec<usize>>> =
        d.split(Split::Test).chunks(64).map(|c| c.iter().map(|q| q.src.clone()).collect()).collect();
    let small = Variant::Extracted(m, &mask).prepare(&d.src, &d.tgt).unwrap();
    let full = Variant::Dense(&m.net).prepare(&d.src, &d.tgt).unwrap();
    let ts = measure_throughput(1, 5, || decode_workload(&small, &batches, &dc)).unwrap();
    let tf = measure_throughput(1, 5, || decode_workload(&full, &batches, &dc)).unwrap();
    let pc = count_params_sparse(m, &mask, &d.src, &d.tgt, true).unwrap();
    let c = m.config();
    let b = c.budgets;
    let n = m.net.languages.len();
    let closed = closed_form_params(c, (b.enc_layers, b.dec_layers), b.heads, b.blocks, n, true);
    let closed_total = closed_form_params(c, (c.enc_layers, c.dec_layers), c.heads, c.blocks, n, true);
    out.record(
        9,
        "extracted inference",
        ts.median > tf.median && pc.active < pc.total && pc.active == closed && pc.total == closed_total,
        format!(
            "{:.0} vs {:.0} tok/s (median of 5), params {} active / {} total, closed form {} / {}",
            ts.median, tf.median, pc.active, pc.total, closed, closed_total
        ),
    );

    let first4 = &runs[..4];
    let wins = first4
        .iter()
        .filter(|r| matches!((r.within_family, r.cross_family), (Some(w), Some(x)) if w > x))
        .count();
    let detail: Vec<String> = first4
        .iter()
        .map(|r| format!("{:.3}/{:.3}", r.within_family.unwrap_or(f64::NAN), r.cross_family.unwrap_or(f64::NAN)))
        .collect();
    out.record(
        10,
        "family overlap",
        wins >= 3,
        format!("within > cross Jaccard in {wins}/4 runs (within/cross {})", detail.join(" ")),
    );

    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR"));
    let summary = serde_json::json!({ "runs": runs, "lines": out.lines });
    let _ = std::fs::write(dir.join("acceptance.json"), serde_json::to_string_pretty(&summary).unwrap());

    println!("acceptance: {} of {} criteria passed", out.lines.len() - out.failed, out.lines.len());
    if out.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
