use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sparse_mt::analysis::{
    language_vectors, overlap_csv, pca_project, projection_csv, projection_svg, resource_breakdown,
    selection_overlap,
};
use sparse_mt::config::{Preset, RunConfig};
use sparse_mt::corpus::{self, Corpus, Split};
use sparse_mt::gating::SubNetworkMask;
use sparse_mt::inference::{
    count_params, count_params_sparse, decode_workload, evaluate_parallel, format_table, measure_throughput,
    EvalReport, Variant,
};
use sparse_mt::model::checkpoint::{self, Checkpoint, SavedModel};
use sparse_mt::model::{extract_subnetwork, GateMode};
use sparse_mt::trainer::{Trainer, CHECKPOINT_DIR, FINAL_DIR};
use sparse_mt::{verify, Error, Result};

const THREADS_VAR: &str = "SPARSE_MT_THREADS";

#[derive(Parser)]
#[command(name = "sparse-mt", version, about = "Language-conditioned sparse Transformer for multilingual translation")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration used when no --config is given.
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Overrides the corpus seed for gen-data and the training seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    #[value(name = "paper-public24")]
    PaperPublic24,
    #[value(name = "paper-opus100")]
    PaperOpus100,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::PaperPublic24 => Preset::PaperPublic24,
            PresetArg::PaperOpus100 => Preset::PaperOpus100,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Compact per-direction sub-networks.
    Extracted,
    /// Full network with top-k masks.
    Hard,
    /// Full network with evaluation-mode scores.
    Soft,
    /// Full network with every gate open.
    Ungated,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train a model.
    Train {
        /// Corpus written by gen-data; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint under --out.
        #[arg(long)]
        resume: bool,
        /// Train the ungated network of the budgeted size instead.
        #[arg(long)]
        dense: bool,
    },
    /// Translate a split and report BLEU and parameter counts.
    Eval {
        /// Checkpoint directory, or a training output directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Gating of a sparse checkpoint.
        #[arg(long, value_enum, default_value = "extracted")]
        mode: Mode,
        /// Also time decoding (median of 5 runs).
        #[arg(long)]
        throughput: bool,
    },
    /// Write a compact checkpoint per language pair.
    Extract {
        #[arg(long)]
        model: PathBuf,
    },
    /// Score-vector PCA, selection overlap and resource-tier breakdown.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation report to break down by resource tier.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the numerical self-checks.
    Verify,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Io { .. } | Error::TomlDe(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(format!("{THREADS_VAR} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(cli.preset.unwrap_or(PresetArg::Desk).into()),
    };
    if let Some(s) = cli.seed {
        match cli.command {
            Command::GenData => c.data.seed = s,
            _ => c.train.seed = s,
        }
    }
    c.validate()?;
    Ok(c)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn corpus_for(config: &RunConfig, data: Option<&Path>) -> Result<Corpus> {
    let c = match data {
        Some(dir) => Corpus::load(dir)?,
        None => corpus::generate(&config.data.corpus, config.data.seed)?,
    };
    if c.vocab_size != config.data.corpus.vocab_size {
        return Err(Error::config(format!(
            "corpus vocabulary {} does not match the configured {}",
            c.vocab_size, config.data.corpus.vocab_size
        )));
    }
    Ok(c)
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    let fin = path.join(FINAL_DIR);
    if !path.join(checkpoint::MANIFEST).exists() && fin.join(checkpoint::MANIFEST).exists() {
        fin
    } else {
        path.to_path_buf()
    }
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    checkpoint::load(&checkpoint_dir(path))
}

fn write_json<V: Serialize>(path: &Path, v: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let threads = threads()?;
    if let Command::Verify = cli.command {
        return run_verify();
    }
    let config = load_config(&cli)?;
    match &cli.command {
        Command::GenData => {
            let out = out_dir(&cli, "data");
            let c = corpus::generate(&config.data.corpus, config.data.seed)?;
            c.save(&out)?;
            println!(
                "wrote {} directions, {} training pairs to {}",
                c.directions.len(),
                c.total_train_pairs(),
                out.display()
            );
        }
        Command::Train { data, resume, dense } => {
            let mut config = config;
            if *dense {
                config.gating.enabled = false;
            }
            let out = out_dir(&cli, "run");
            let corpus = corpus_for(&config, data.as_deref())?;
            let mut tr = if *resume {
                let t = Trainer::resume(&out.join(CHECKPOINT_DIR), &corpus)?;
                if t.config != config {
                    return Err(Error::config("configuration differs from the checkpoint being resumed"));
                }
                t
            } else {
                Trainer::new(&config, &corpus)?
            };
            create_dir(&out)?;
            write_text(&out.join("config.toml"), &config.to_toml()?)?;
            let every = config.train.log_every.max(1) * 50;
            let steps = config.train.steps;
            tr.run(&corpus, Some(&out), |r| {
                if r.step % every == 0 || r.step == steps {
                    eprintln!(
                        "step {:>6} phase {} l_cp {:.4} l_s {:.3} l_d {:.3} l_t {:.3} total {:.4}",
                        r.step, r.phase, r.l_cp, r.l_s, r.l_d, r.l_t, r.total
                    );
                }
            })?;
            println!("model written to {}", out.join(FINAL_DIR).display());
        }
        Command::Eval {
            model,
            data,
            split,
            mode,
            throughput,
        } => {
            let out = out_dir(&cli, "eval");
            let ck = load_model(model)?;
            let mut corpus = corpus_for(&config, data.as_deref())?;
            let split: Split = (*split).into();
            let label = model
                .file_name()
                .map_or_else(|| "model".to_string(), |n| n.to_string_lossy().into_owned());
            let report = match &ck.model {
                SavedModel::Dense(net) => {
                    if let Some(b) = &net.baked {
                        corpus.directions.retain(|d| d.src == b.src_lang && d.tgt == b.tgt_lang);
                        if corpus.directions.is_empty() {
                            return Err(Error::input(format!("corpus has no {}-{} direction", b.src_lang, b.tgt_lang)));
                        }
                    }
                    let v = Variant::Dense(net);
                    eval_variant(&label, &v, &corpus, split, &config, count_params(net, true), *throughput, threads)?
                }
                SavedModel::Sparse(m) => {
                    let mask = SubNetworkMask::from_table(&m.scores, m.config().budgets)?;
                    let d = corpus
                        .directions
                        .first()
                        .ok_or_else(|| Error::input("corpus has no directions"))?;
                    let params = match mode {
                        Mode::Ungated => count_params(&m.net, true),
                        _ => count_params_sparse(m, &mask, &d.src, &d.tgt, true)?,
                    };
                    let v = match mode {
                        Mode::Extracted => Variant::Extracted(m, &mask),
                        Mode::Hard => Variant::Gated(m, GateMode::Hard),
                        Mode::Soft => Variant::Gated(m, GateMode::Soft),
                        Mode::Ungated => Variant::Gated(m, GateMode::Ungated),
                    };
                    eval_variant(&label, &v, &corpus, split, &config, params, *throughput, threads)?
                }
            };
            create_dir(&out)?;
            write_json(&out.join("report.json"), &report)?;
            print!("{}", format_table(std::slice::from_ref(&report)));
        }
        Command::Extract { model } => {
            let out = out_dir(&cli, "extracted");
            let ck = load_model(model)?;
            let SavedModel::Sparse(m) = &ck.model else {
                return Err(Error::input("extraction needs a gated checkpoint"));
            };
            let mask = SubNetworkMask::from_table(&m.scores, m.config().budgets)?;
            let s = &m.scores;
            mask.check_budgets(&s.encoder, &s.decoder)?;
            create_dir(&out)?;
            write_json(&out.join("mask.json"), &mask)?;
            let mut written = 0;
            for src in &m.net.languages {
                for tgt in &m.net.languages {
                    if src == tgt {
                        continue;
                    }
                    let small = extract_subnetwork(m, &mask, src, tgt)?;
                    let dir = out.join(format!("{src}-{tgt}"));
                    checkpoint::save(&dir, &Checkpoint::new(SavedModel::Dense(small)))?;
                    written += 1;
                }
            }
            let params = count_params_sparse(m, &mask, &m.net.languages[0], &m.net.languages[1], true)?;
            write_json(&out.join("params.json"), &params)?;
            println!(
                "wrote {written} sub-networks of {} active / {} total parameters to {}",
                params.active,
                params.total,
                out.display()
            );
        }
        Command::Analyze { model, data, report } => {
            let out = out_dir(&cli, "analysis");
            let ck = load_model(model)?;
            let SavedModel::Sparse(m) = &ck.model else {
                return Err(Error::input("analysis needs a gated checkpoint"));
            };
            let corpus = corpus_for(&config, data.as_deref())?;
            let manifest = corpus.manifest();
            let family_of = manifest
                .languages
                .iter()
                .map(|l| (l.id.clone(), l.family.clone()))
                .collect();
            let report: Option<EvalReport> = match report {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    Some(serde_json::from_str(&text)?)
                }
                None => None,
            };
            let tiers = report.as_ref().map(|r| resource_breakdown(r, &manifest)).transpose()?;
            let vectors = language_vectors(&m.scores)?;
            let pca = pca_project(&vectors, 2)?;
            let mask = SubNetworkMask::from_table(&m.scores, m.config().budgets)?;
            let overlap = selection_overlap(&mask, &m.scores.encoder, &m.scores.decoder, &family_of)?;
            create_dir(&out)?;
            write_text(&out.join("pca.csv"), &projection_csv(&pca)?)?;
            write_text(&out.join("pca.svg"), &projection_svg(&pca, &family_of)?)?;
            write_json(&out.join("pca.json"), &pca)?;
            write_text(&out.join("overlap.csv"), &overlap_csv(&overlap))?;
            write_json(&out.join("overlap.json"), &overlap)?;
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
            println!(
                "mean Jaccard within families {}, across families {}",
                fmt(overlap.within_family),
                fmt(overlap.cross_family)
            );
            if let Some(t) = tiers {
                write_json(&out.join("tiers.json"), &t)?;
                for (tier, b) in &t {
                    println!("{tier:<8} {b:>8.2}");
                }
            }
        }
        Command::Verify => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn eval_variant(
    label: &str,
    v: &Variant<'_, f32>,
    corpus: &Corpus,
    split: Split,
    config: &RunConfig,
    params: sparse_mt::inference::ParamCount,
    throughput: bool,
    threads: usize,
) -> Result<EvalReport> {
    let mut report = evaluate_parallel(label, v, corpus, split, &config.eval, params, threads)?;
    if throughput {
        let d = corpus
            .directions
            .iter()
            .find(|d| !d.split(split).is_empty())
            .ok_or_else(|| Error::input("no sentences to time"))?;
        let p = v.prepare(&d.src, &d.tgt)?;
        let batches: Vec<Vec<Vec<usize>>> = d
            .split(split)
            .chunks(64)
            .map(|c| c.iter().map(|q| q.src.clone()).collect())
            .collect();
        report.throughput = Some(measure_throughput(1, 5, || decode_workload(&p, &batches, &config.eval))?);
    }
    Ok(report)
}

fn run_verify() -> Result<ExitCode> {
    let checks = verify::run_all()?;
    let mut ok = true;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
