//! Checkpoint directory: `manifest.json` describing every tensor by name,
//! shape and byte offset, plus `tensors.bin` holding the raw little-endian
//! f32 data back to back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gating::{ComponentLayout, ScoreTable};
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::{Architecture, BakedGates, ModelConfig, ParamStore, SparseModel, Transformer};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "tensors.bin";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GatingMeta {
    encoder: ComponentLayout,
    decoder: ComponentLayout,
    temperature: f64,
    eval_temperature: f64,
    prior_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub config: ModelConfig,
    pub languages: Vec<String>,
    pub arch: Architecture,
    pub baked: Option<BakedGates>,
    gating: Option<GatingMeta>,
    pub tensors: Vec<TensorEntry>,
    /// Caller-defined state (training step, phase, RNG positions).
    #[serde(default)]
    pub state: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SavedModel {
    Sparse(SparseModel<f32>),
    Dense(Transformer<f32>),
}

impl SavedModel {
    pub fn net(&self) -> &Transformer<f32> {
        match self {
            SavedModel::Sparse(m) => &m.net,
            SavedModel::Dense(t) => t,
        }
    }
}

/// A model plus optional named extra tensors (optimizer moments) and state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SavedModel,
    pub extra: Vec<(String, Tensor<f32>)>,
    pub state: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: SavedModel) -> Self {
        Checkpoint {
            model,
            extra: Vec::new(),
            state: serde_json::Value::Null,
        }
    }
}

fn mu_name(site: &str, lang: &str) -> String {
    format!("scores.{site}.{lang}")
}

fn extra_name(name: &str) -> String {
    format!("extra.{name}")
}

pub fn save(dir: &Path, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let net = ck.model.net();
    let mut named: Vec<(String, Vec<usize>, &[f32])> = net
        .params
        .names
        .iter()
        .zip(&net.params.tensors)
        .map(|(n, t)| (n.clone(), t.shape.clone(), t.data.as_slice()))
        .collect();
    let gating = match &ck.model {
        SavedModel::Sparse(m) => {
            let s = &m.scores;
            for (i, lang) in s.languages.iter().enumerate() {
                for (site, rows) in [("encoder", &s.mu_encoder), ("decoder", &s.mu_decoder)] {
                    named.push((mu_name(site, lang), vec![rows[i].len()], rows[i].as_slice()));
                }
            }
            Some(GatingMeta {
                encoder: s.encoder.clone(),
                decoder: s.decoder.clone(),
                temperature: s.temperature,
                eval_temperature: s.eval_temperature,
                prior_p: s.prior_p,
            })
        }
        SavedModel::Dense(_) => None,
    };
    for (n, t) in &ck.extra {
        named.push((extra_name(n), t.shape.clone(), t.data.as_slice()));
    }

    let mut blob = Vec::with_capacity(named.iter().map(|(_, _, d)| d.len() * 4).sum());
    let mut tensors = Vec::with_capacity(named.len());
    for (name, shape, data) in named {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: blob.len(),
        });
        for x in data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT,
        config: net.config.clone(),
        languages: net.languages.clone(),
        arch: net.arch.clone(),
        baked: net.baked.clone(),
        gating,
        tensors,
        state: ck.state.clone(),
    };
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_slice(&text)?;
    if m.format != FORMAT {
        return Err(Error::input(format!("unsupported checkpoint format {}", m.format)));
    }
    Ok(m)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    manifest.config.validate()?;
    let bpath = dir.join(BLOB);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;

    let mut by_name = std::collections::HashMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > blob.len() {
            return Err(Error::input(format!("tensor {} runs past the end of the blob", e.name)));
        }
        let data: Vec<f32> = blob[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        by_name.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    let mut take = |name: &str| {
        by_name
            .remove(name)
            .ok_or_else(|| Error::input(format!("checkpoint lacks tensor {name}")))
    };

    let mut params = ParamStore::default();
    let param_names: Vec<&String> = manifest
        .tensors
        .iter()
        .map(|e| &e.name)
        .filter(|n| !n.starts_with("scores.") && !n.starts_with("extra."))
        .collect();
    for n in param_names {
        params.add(n.clone(), take(n)?);
    }
    let net = Transformer {
        config: manifest.config.clone(),
        languages: manifest.languages.clone(),
        arch: manifest.arch.clone(),
        params,
        baked: manifest.baked.clone(),
    };
    let model = match &manifest.gating {
        Some(meta) => {
            let mut scores = ScoreTable::new(manifest.languages.clone(), meta.encoder.clone(), meta.decoder.clone());
            scores.temperature = meta.temperature;
            scores.eval_temperature = meta.eval_temperature;
            scores.prior_p = meta.prior_p;
            for (i, lang) in manifest.languages.iter().enumerate() {
                scores.mu_encoder[i] = take(&mu_name("encoder", lang))?.data;
                scores.mu_decoder[i] = take(&mu_name("decoder", lang))?.data;
            }
            SavedModel::Sparse(SparseModel { net, scores })
        }
        None => SavedModel::Dense(net),
    };
    let mut extra = Vec::new();
    for e in &manifest.tensors {
        if let Some(n) = e.name.strip_prefix("extra.") {
            extra.push((n.to_string(), take(&e.name)?));
        }
    }
    Ok(Checkpoint {
        model,
        extra,
        state: manifest.state,
    })
}
