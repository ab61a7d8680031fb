//! Two-phase training loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{sample_direction, Batch, BatchStream, Corpus};
use crate::gating::{apply_hard_on_graph, logistic_noise, top_k_mask, Site};
use crate::model::checkpoint::{self, Checkpoint, SavedModel};
use crate::model::{dense_active_architecture, Ctx, DropoutCtx, SparseModel, PAD};
use crate::objectives::{
    disparity_on_graph, language_pairs, phase_loss, sparsity_on_graph, topk_on_graph, Coefficients, LogRecord,
    LossBreakdown, Phase,
};
use crate::rng::{stream, Purpose};
use crate::tensor::{clip_global_norm, Adam, Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

pub const LOG_FILE: &str = "train.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const FINAL_DIR: &str = "final";
pub const SCORES_FILE: &str = "scores.csv";

const SITES: [Site; 2] = [Site::Encoder, Site::Decoder];

/// Position of one direction's batch stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPos {
    pub epoch: u64,
    pub cursor: usize,
}

/// Everything besides tensors needed to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed steps.
    pub step: usize,
    pub seed: u64,
    pub gated: bool,
    pub streams: Vec<StreamPos>,
    pub adam_steps: Vec<u64>,
    pub config: RunConfig,
}

/// Learning rate at step `t` (1-based): linear warmup, then inverse
/// square-root decay.
pub fn learning_rate(base: f64, warmup: usize, t: usize) -> f64 {
    let t = t.max(1) as f64;
    if warmup == 0 {
        return base;
    }
    let w = warmup as f64;
    base * (t / w).min((w / t).sqrt())
}

pub fn phase_at(step: usize, phase_switch: usize) -> Phase {
    if step <= phase_switch {
        Phase::One
    } else {
        Phase::Two
    }
}

pub struct Trainer {
    pub model: SparseModel<f32>,
    /// False trains the network alone with the translation loss.
    pub gated: bool,
    pub config: RunConfig,
    pub step: usize,
    adam: Adam<f32>,
    streams: Vec<BatchStream>,
    directions: Vec<usize>,
    sizes: Vec<usize>,
}

struct GateVars {
    /// Selection logits of every language, per site.
    mu: Vec<[Option<Var>; 2]>,
    /// Sampled scores of the batch: source language encoder, target
    /// language decoder.
    soft: [Option<Var>; 2],
}

impl Trainer {
    /// Fresh trainer. With gating disabled in `config` the network is the
    /// ungated budgeted architecture.
    pub fn new(config: &RunConfig, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        let mc = config.model_config();
        if corpus.vocab_size != mc.vocab_size {
            return Err(Error::config("corpus vocabulary does not match the configuration"));
        }
        let langs = corpus.language_ids();
        let seed = config.train.seed;
        let mut model = SparseModel::<f32>::new(mc.clone(), langs.clone(), seed)?;
        if !config.gating.enabled {
            model.net = dense_active_architecture(mc, langs, seed)?;
        }
        model.scores.temperature = config.gating.temperature;
        model.scores.eval_temperature = config.gating.eval_temperature;
        let init = config.gating.init_logit as f32;
        for row in model.scores.mu_encoder.iter_mut().chain(model.scores.mu_decoder.iter_mut()) {
            row.fill(init);
        }
        Self::assemble(model, config.clone(), corpus)
    }

    fn assemble(model: SparseModel<f32>, config: RunConfig, corpus: &Corpus) -> Result<Self> {
        let gated = config.gating.enabled && config.gating.sparsity.any();
        let mut streams = Vec::new();
        let mut directions = Vec::new();
        let mut sizes = Vec::new();
        for (i, d) in corpus.directions.iter().enumerate() {
            if d.zero_shot || d.train.is_empty() {
                continue;
            }
            model.net.language_index(&d.src)?;
            model.net.language_index(&d.tgt)?;
            streams.push(BatchStream::new(d, config.train.batch_tokens, config.train.seed ^ ((i as u64) << 32))?);
            directions.push(i);
            sizes.push(d.train.len());
        }
        if streams.is_empty() {
            return Err(Error::Batching("corpus has no training directions".into()));
        }
        let mut trainer = Trainer {
            adam: Adam::new(config.train.adam, Vec::new()),
            model,
            gated,
            config,
            step: 0,
            streams,
            directions,
            sizes,
        };
        trainer.adam = Adam::new(trainer.config.train.adam, trainer.param_sizes());
        Ok(trainer)
    }

    fn param_sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.model.net.params.tensors.iter().map(|t| t.numel()).collect();
        if self.gated {
            let t = &self.model.scores;
            s.extend(t.mu_encoder.iter().chain(&t.mu_decoder).map(Vec::len).filter(|&n| n > 0));
        }
        s
    }

    pub fn phase(&self, step: usize) -> Phase {
        if self.gated {
            phase_at(step, self.config.train.phase_switch)
        } else {
            Phase::One
        }
    }

    pub fn coefficients(&self) -> Coefficients {
        if self.gated {
            self.config.gating.coefficients
        } else {
            Coefficients {
                c_s: 0.0,
                c_d: 0.0,
                c_t: 0.0,
            }
        }
    }

    /// Logistic noise of language `lang` at `site` for step `t`.
    pub fn gumbel_noise(&self, t: usize, lang: usize, site: Site) -> Vec<f64> {
        let n = self.model.scores.layout(site).len();
        let mut rng = stream(self.config.train.seed, Purpose::Gumbel, t as u64, (lang * 2 + site_index(site)) as u64);
        logistic_noise(n, &mut rng)
    }

    fn gate_vars(&self, g: &mut Graph<f32>, t: usize, langs: [usize; 2]) -> Result<GateVars> {
        let table = &self.model.scores;
        let mut mu = Vec::new();
        let mut soft = [None, None];
        for l in 0..table.languages.len() {
            let mut m = [None, None];
            for site in SITES {
                let k = site_index(site);
                let row = match site {
                    Site::Encoder => &table.mu_encoder[l],
                    Site::Decoder => &table.mu_decoder[l],
                };
                if row.is_empty() {
                    continue;
                }
                let v = g.param_from(vec![row.len()], row.clone());
                if langs[k] == l {
                    let noise = self.gumbel_noise(t, l, site);
                    soft[k] = Some(table.scores_on_graph(g, v, Some(&noise))?);
                }
                m[k] = Some(v);
            }
            mu.push(m);
        }
        Ok(GateVars { mu, soft })
    }

    /// One optimizer step on `batch` as step `t` (1-based).
    pub fn train_step(&mut self, batch: &Batch, t: usize) -> Result<LossBreakdown> {
        let phase = self.phase(t);
        let c = self.coefficients();
        let sl = self.model.net.language_index(&batch.src_lang)?;
        let tl = self.model.net.language_index(&batch.tgt_lang)?;
        let mut g = Graph::<f32>::new();
        let bound = self.model.net.params.bind(&mut g, true);
        let gates = if self.gated {
            Some(self.gate_vars(&mut g, t, [sl, tl])?)
        } else {
            None
        };

        let mut aux = Vec::new();
        let (mut l_s, mut l_d, mut l_t) = (None, None, None);
        let (mut enc, mut dec) = (None, None);
        if let Some(gv) = &gates {
            let soft: Vec<Var> = gv.soft.iter().flatten().copied().collect();
            match phase {
                Phase::One => {
                    [enc, dec] = gv.soft;
                    let v = sparsity_on_graph(&mut g, &soft)?;
                    aux.push((v, c.c_s));
                    l_s = Some(v);
                }
                Phase::Two => {
                    let table = &self.model.scores;
                    let budgets = self.model.config().budgets;
                    let mut masks = Vec::new();
                    let mut d = g.scalar_constant(0.0);
                    for site in SITES {
                        let k = site_index(site);
                        let Some(s) = gv.soft[k] else { continue };
                        let own = [sl, tl][k];
                        let mut means = Vec::new();
                        for (l, m) in gv.mu.iter().enumerate() {
                            let mean = table.scores_on_graph(&mut g, m[k].expect("gated row"), None)?;
                            if l == own {
                                let vals: Vec<f64> = g.data(mean).iter().map(|x| x.to_f64_lossy()).collect();
                                let mask = top_k_mask(table.layout(site), &vals, &budgets)?;
                                let hard = apply_hard_on_graph(&mut g, s, &mask)?;
                                if k == 0 {
                                    enc = Some(hard);
                                } else {
                                    dec = Some(hard);
                                }
                                masks.push(mask);
                            }
                            means.push(mean);
                        }
                        let v = disparity_on_graph(&mut g, &means)?;
                        d = g.add(d, v)?;
                    }
                    let tk = topk_on_graph(&mut g, &soft, &masks)?;
                    aux.push((d, c.c_d));
                    aux.push((tk, c.c_t));
                    l_d = Some(d);
                    l_t = Some(tk);
                }
            }
        }

        let mut ctx = Ctx::new(&mut g, &bound);
        if self.config.model.dropout > 0.0 {
            ctx.dropout = Some(DropoutCtx {
                p: self.config.model.dropout,
                seed: self.config.train.seed,
                step: t as u64,
                calls: 0,
            });
        }
        let (_, logits) = self.model.forward(&mut ctx, &batch.src, &batch.tgt_in, &batch.src_lang, &batch.tgt_lang, enc, dec)?;
        let l_cp = g.cross_entropy(logits, &batch.tgt_out, PAD)?;
        let mut total = l_cp;
        for (v, coef) in aux {
            if coef != 0.0 {
                let w = g.scale(v, coef as f32);
                total = g.add(total, w)?;
            }
        }
        let item = |g: &Graph<f32>, v: Option<Var>| v.map_or(0.0, |v| g.item(v).to_f64_lossy());
        let b = phase_loss(
            phase,
            item(&g, Some(l_cp)),
            item(&g, l_s),
            item(&g, l_d),
            item(&g, l_t),
            c,
        );
        if !b.total.is_finite() {
            return Err(Error::Divergence {
                step: t,
                phase: phase.number(),
                detail: format!("non-finite loss {b:?}"),
            });
        }
        g.backward(total)?;

        let mut grads: Vec<Option<Vec<f32>>> = bound.0.iter().map(|&v| g.take_grad(v)).collect();
        if let Some(gv) = &gates {
            for k in 0..2 {
                for m in &gv.mu {
                    if let Some(v) = m[k] {
                        grads.push(g.take_grad(v));
                    }
                }
            }
        }
        let n_net = bound.0.len();
        let norm = clip_global_norm(&mut grads[..n_net], self.config.train.clip);
        let mu_finite = grads[n_net..].iter().flatten().flatten().all(|x| x.is_finite());
        if !norm.is_finite() || !mu_finite {
            return Err(Error::Divergence {
                step: t,
                phase: phase.number(),
                detail: "non-finite gradient".into(),
            });
        }
        let lr = learning_rate(self.config.train.lr, self.config.train.warmup, t);
        self.apply(&grads, lr);
        Ok(b)
    }

    fn apply(&mut self, grads: &[Option<Vec<f32>>], lr: f64) {
        let gated = self.gated;
        let net = &mut self.model.net.params.tensors;
        let table = &mut self.model.scores;
        let mut flat: Vec<Vec<f32>> = net.iter_mut().map(|t| std::mem::take(&mut t.data)).collect();
        let mut taken = Vec::new();
        if gated {
            for row in table.mu_encoder.iter_mut().chain(table.mu_decoder.iter_mut()) {
                taken.push(!row.is_empty());
                if !row.is_empty() {
                    flat.push(std::mem::take(row));
                }
            }
        }
        let mut padded: Vec<Option<Vec<f32>>> = grads.to_vec();
        padded.resize(flat.len(), None);
        let n_net = net.len();
        let mu_lr = lr * self.config.gating.score_lr_scale;
        self.adam.step_with(&mut flat, &padded, |i| if i < n_net { lr } else { mu_lr });
        let mut it = flat.into_iter();
        for t in net.iter_mut() {
            t.data = it.next().expect("one buffer per tensor");
        }
        if gated {
            let rows = table.mu_encoder.iter_mut().chain(table.mu_decoder.iter_mut());
            for (row, _) in rows.zip(&taken).filter(|(_, &t)| t) {
                *row = it.next().expect("one buffer per row");
            }
        }
    }

    /// Index into the training directions drawn for step `t`.
    pub fn direction_for(&self, t: usize) -> Result<usize> {
        let mut rng = stream(self.config.train.seed, Purpose::Direction, t as u64, 0);
        sample_direction(&self.sizes, self.config.train.direction_tau, &mut rng)
    }

    pub fn next_batch(&mut self, corpus: &Corpus, t: usize) -> Result<Batch> {
        let i = self.direction_for(t)?;
        let d = &corpus.directions[self.directions[i]];
        self.streams[i].next_batch(d)
    }

    /// Runs until `train.steps`, writing the log, periodic checkpoints and
    /// the final model under `out` when given.
    pub fn run<F>(&mut self, corpus: &Corpus, out: Option<&Path>, mut progress: F) -> Result<Vec<LogRecord>>
    where
        F: FnMut(&LogRecord),
    {
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(LOG_FILE);
                let f = OpenOptions::new()
                    .create(true)
                    .append(self.step > 0)
                    .write(true)
                    .truncate(self.step == 0)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, BufWriter::new(f)))
            }
            None => None,
        };
        let pairs = language_pairs(self.model.scores.languages.len());
        let mut records = Vec::new();
        let (steps, every, ck_every) = (
            self.config.train.steps,
            self.config.train.log_every.max(1),
            self.config.train.checkpoint_every,
        );
        while self.step < steps {
            let t = self.step + 1;
            let batch = self.next_batch(corpus, t)?;
            let b = self.train_step(&batch, t)?;
            self.step = t;
            if t % every == 0 || t == steps {
                let r = LogRecord::new(t, &b, pairs);
                if let Some((path, w)) = &mut log {
                    serde_json::to_writer(&mut *w, &r)?;
                    writeln!(w).map_err(|e| Error::io(&*path, e))?;
                }
                progress(&r);
                records.push(r);
            }
            if let Some(dir) = out {
                if ck_every > 0 && t % ck_every == 0 && t < steps {
                    if let Some((path, w)) = &mut log {
                        w.flush().map_err(|e| Error::io(&*path, e))?;
                    }
                    self.save(&dir.join(CHECKPOINT_DIR))?;
                }
            }
        }
        if let Some((path, w)) = &mut log {
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(dir) = out {
            self.save(&dir.join(FINAL_DIR))?;
            self.write_scores(&dir.join(SCORES_FILE))?;
        }
        Ok(records)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            seed: self.config.train.seed,
            gated: self.gated,
            streams: self
                .streams
                .iter()
                .map(|s| StreamPos {
                    epoch: s.epoch,
                    cursor: s.cursor,
                })
                .collect(),
            adam_steps: self.adam.state.steps.clone(),
            config: self.config.clone(),
        }
    }

    /// Checkpoint with optimizer moments and stream positions.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let model = if self.gated {
            SavedModel::Sparse(self.model.clone())
        } else {
            SavedModel::Dense(self.model.net.clone())
        };
        let mut ck = Checkpoint::new(model);
        let s = &self.adam.state;
        for (i, (m, v)) in s.m.iter().zip(&s.v).enumerate() {
            if m.is_empty() {
                continue;
            }
            ck.extra.push((format!("adam.m.{i}"), Tensor::new(vec![m.len()], m.clone())?));
            ck.extra.push((format!("adam.v.{i}"), Tensor::new(vec![v.len()], v.clone())?));
        }
        ck.state = serde_json::to_value(self.state())?;
        Ok(ck)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.checkpoint()?)
    }

    /// Continues a run from a checkpoint written by [`save`](Self::save).
    pub fn resume(dir: &Path, corpus: &Corpus) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        let state: TrainState = serde_json::from_value(ck.state.clone())
            .map_err(|e| Error::input(format!("{}: not a training checkpoint: {e}", dir.display())))?;
        let model = match ck.model {
            SavedModel::Sparse(m) => m,
            SavedModel::Dense(net) => {
                let mc = state.config.model_config();
                let mut m = SparseModel::new(mc, net.languages.clone(), state.seed)?;
                m.net = net;
                m
            }
        };
        let mut tr = Self::assemble(model, state.config.clone(), corpus)?;
        if tr.gated != state.gated || state.streams.len() != tr.streams.len() {
            return Err(Error::input("checkpoint does not match the corpus"));
        }
        if state.adam_steps.len() != tr.adam.state.steps.len() {
            return Err(Error::input("optimizer state does not match the model"));
        }
        tr.adam.state.steps = state.adam_steps.clone();
        for (name, t) in ck.extra {
            let (kind, idx) = name
                .strip_prefix("adam.m.")
                .map(|i| (0, i))
                .or_else(|| name.strip_prefix("adam.v.").map(|i| (1, i)))
                .ok_or_else(|| Error::input(format!("unexpected tensor {name}")))?;
            let i: usize = idx.parse().map_err(|_| Error::input(format!("bad tensor name {name}")))?;
            let slot = match kind {
                0 => tr.adam.state.m.get_mut(i),
                _ => tr.adam.state.v.get_mut(i),
            }
            .ok_or_else(|| Error::input(format!("{name} has no matching parameter")))?;
            if slot.len() != t.data.len() {
                return Err(Error::input(format!("{name} has the wrong size")));
            }
            *slot = t.data;
        }
        for ((s, pos), &di) in tr.streams.iter_mut().zip(&state.streams).zip(&tr.directions) {
            s.seek(&corpus.directions[di], pos.epoch, pos.cursor)?;
        }
        tr.step = state.step;
        Ok(tr)
    }

    pub fn write_scores(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.model.scores.write_csv(BufWriter::new(f), &self.model.config().budgets)
    }

    pub fn log_path(out: &Path) -> PathBuf {
        out.join(LOG_FILE)
    }
}

fn site_index(site: Site) -> usize {
    match site {
        Site::Encoder => 0,
        Site::Decoder => 1,
    }
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
