//! Synthetic multilingual parallel data.
//!
//! Every sentence pair renders one hidden "meaning" sequence in two
//! languages. A language renders a meaning by applying its family's word
//! order (copy, reverse, pairwise local swap) and then its own token cipher.
//! Family members start from a shared base cipher and differ by a few
//! language-specific transpositions.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{SeqBatch, BOS, EOS, FIRST_CONTENT, PAD};
use crate::rng::{stream, Purpose};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    Copy,
    Reverse,
    LocalSwap,
}

impl Order {
    /// Every order is its own inverse.
    pub fn apply(self, xs: &[usize]) -> Vec<usize> {
        match self {
            Order::Copy => xs.to_vec(),
            Order::Reverse => xs.iter().rev().copied().collect(),
            Order::LocalSwap => {
                let mut v = xs.to_vec();
                for pair in v.chunks_exact_mut(2) {
                    pair.swap(0, 1);
                }
                v
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    High,
    Medium,
    Low,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::High => "high",
            Tier::Medium => "medium",
            Tier::Low => "low",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub name: String,
    pub order: Order,
    /// Base cipher is the identity when false.
    #[serde(default = "yes")]
    pub cipher: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub id: String,
    pub family: String,
    pub tier: Tier,
    /// Transpositions applied on top of the family cipher.
    #[serde(default)]
    pub swaps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub families: Vec<FamilySpec>,
    pub languages: Vec<LanguageSpec>,
    /// Training pairs per direction for each tier; a direction gets the
    /// smaller of its two languages' sizes.
    pub tier_sizes: BTreeMap<Tier, usize>,
    pub valid_per_direction: usize,
    pub test_per_direction: usize,
    /// Explicit `[src, tgt]` directions; empty means all ordered pairs.
    #[serde(default)]
    pub directions: Vec<[String; 2]>,
    /// Directions with no training pairs.
    #[serde(default)]
    pub zero_shot: Vec<[String; 2]>,
}

impl CorpusSpec {
    /// Two families of three languages over a 64-token vocabulary with one
    /// held-out direction, about 20k training pairs in total.
    pub fn desk() -> Self {
        let lang = |id: &str, family: &str, tier| LanguageSpec {
            id: id.into(),
            family: family.into(),
            tier,
            swaps: 6,
        };
        CorpusSpec {
            vocab_size: 64,
            min_len: 3,
            max_len: 8,
            families: vec![
                FamilySpec {
                    name: "fwd".into(),
                    order: Order::Copy,
                    cipher: true,
                },
                FamilySpec {
                    name: "rev".into(),
                    order: Order::Reverse,
                    cipher: true,
                },
            ],
            languages: vec![
                lang("fa", "fwd", Tier::High),
                lang("fb", "fwd", Tier::Medium),
                lang("fc", "fwd", Tier::Low),
                lang("ra", "rev", Tier::High),
                lang("rb", "rev", Tier::Medium),
                lang("rc", "rev", Tier::Low),
            ],
            tier_sizes: BTreeMap::from([(Tier::High, 1200), (Tier::Medium, 850), (Tier::Low, 500)]),
            valid_per_direction: 20,
            test_per_direction: 40,
            directions: Vec::new(),
            zero_shot: vec![["fb".into(), "fc".into()]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::config("vocabulary must hold at least 8 tokens"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("need 0 < min_len <= max_len"));
        }
        let mut ids = HashSet::new();
        for l in &self.languages {
            if !ids.insert(l.id.as_str()) {
                return Err(Error::config(format!("language {} declared twice", l.id)));
            }
            if !self.families.iter().any(|f| f.name == l.family) {
                return Err(Error::config(format!("language {} names unknown family {}", l.id, l.family)));
            }
            match self.tier_sizes.get(&l.tier) {
                Some(&n) if n > 0 => {}
                _ => return Err(Error::config(format!("tier {} has no positive size", l.tier))),
            }
        }
        for [s, t] in self.directions.iter().chain(&self.zero_shot) {
            for id in [s, t] {
                if !ids.contains(id.as_str()) {
                    return Err(Error::UnknownLanguage(id.clone()));
                }
            }
            if s == t {
                return Err(Error::config(format!("direction {s}->{t} translates into itself")));
            }
        }
        Ok(())
    }

    fn direction_list(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = if self.directions.is_empty() {
            let ids: Vec<&String> = self.languages.iter().map(|l| &l.id).collect();
            ids.iter()
                .flat_map(|s| ids.iter().filter(move |t| t != &s).map(move |t| ((*s).clone(), (*t).clone())))
                .collect()
        } else {
            self.directions.iter().map(|[s, t]| (s.clone(), t.clone())).collect()
        };
        for [s, t] in &self.zero_shot {
            if !out.iter().any(|(a, b)| a == s && b == t) {
                out.push((s.clone(), t.clone()));
            }
        }
        out
    }
}

/// A language with its concrete cipher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguage {
    pub id: String,
    pub family: String,
    pub tier: Tier,
    pub order: Order,
    /// Content token `FIRST_CONTENT + i` renders as `cipher[i]`.
    pub cipher: Vec<usize>,
}

impl SyntheticLanguage {
    pub fn render(&self, meaning: &[usize]) -> Vec<usize> {
        self.order
            .apply(meaning)
            .into_iter()
            .map(|t| self.cipher[t - FIRST_CONTENT])
            .collect()
    }

    pub fn read(&self, surface: &[usize]) -> Vec<usize> {
        let mut inverse = vec![0; self.cipher.len()];
        for (i, &c) in self.cipher.iter().enumerate() {
            inverse[c - FIRST_CONTENT] = i + FIRST_CONTENT;
        }
        let plain: Vec<usize> = surface.iter().map(|&t| inverse[t - FIRST_CONTENT]).collect();
        self.order.apply(&plain)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub src: String,
    pub tgt: String,
    pub zero_shot: bool,
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl Direction {
    pub fn name(&self) -> String {
        format!("{}-{}", self.src, self.tgt)
    }

    pub fn split(&self, split: Split) -> &[Pair] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Pair> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub vocab_size: usize,
    pub max_len: usize,
    pub languages: Vec<SyntheticLanguage>,
    pub directions: Vec<Direction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionInfo {
    pub src: String,
    pub tgt: String,
    pub zero_shot: bool,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub vocab_size: usize,
    pub max_len: usize,
    pub languages: Vec<SyntheticLanguage>,
    pub families: BTreeMap<String, Vec<String>>,
    pub directions: Vec<DirectionInfo>,
}

pub const MANIFEST: &str = "corpus.json";

fn cipher_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (FIRST_CONTENT..FIRST_CONTENT + n).collect();
    p.shuffle(rng);
    p
}

pub fn generate(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let content = spec.vocab_size - FIRST_CONTENT;
    let mut languages = Vec::with_capacity(spec.languages.len());
    for (fi, fam) in spec.families.iter().enumerate() {
        let mut rng = stream(seed, Purpose::Corpus, 0, fi as u64);
        let base = if fam.cipher {
            cipher_permutation(content, &mut rng)
        } else {
            (FIRST_CONTENT..spec.vocab_size).collect()
        };
        for (li, l) in spec.languages.iter().enumerate().filter(|(_, l)| l.family == fam.name) {
            let mut rng = stream(seed, Purpose::Corpus, 1, li as u64);
            let mut cipher = base.clone();
            for _ in 0..l.swaps {
                let (a, b) = (rng.gen_range(0..content), rng.gen_range(0..content));
                cipher.swap(a, b);
            }
            languages.push((
                li,
                SyntheticLanguage {
                    id: l.id.clone(),
                    family: l.family.clone(),
                    tier: l.tier,
                    order: fam.order,
                    cipher,
                },
            ));
        }
    }
    languages.sort_by_key(|(i, _)| *i);
    let languages: Vec<SyntheticLanguage> = languages.into_iter().map(|(_, l)| l).collect();
    let find = |id: &str| languages.iter().find(|l| l.id == id).expect("validated");

    let mut directions = Vec::new();
    for (di, (s, t)) in spec.direction_list().into_iter().enumerate() {
        let (ls, lt) = (find(&s), find(&t));
        let zero_shot = spec.zero_shot.iter().any(|[a, b]| *a == s && *b == t);
        let train_n = if zero_shot {
            0
        } else {
            spec.tier_sizes[&ls.tier].min(spec.tier_sizes[&lt.tier])
        };
        let mut dir = Direction {
            src: s,
            tgt: t,
            zero_shot,
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
        };
        let mut seen = HashSet::new();
        for (si, (split, n)) in [
            (Split::Train, train_n),
            (Split::Valid, spec.valid_per_direction),
            (Split::Test, spec.test_per_direction),
        ]
        .into_iter()
        .enumerate()
        {
            let mut rng = stream(seed, Purpose::Corpus, 2 + si as u64, di as u64);
            let mut attempts = 0usize;
            while dir.split(split).len() < n {
                attempts += 1;
                if attempts > 100 * n + 1000 {
                    return Err(Error::config("sentence space too small for requested split sizes"));
                }
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let meaning: Vec<usize> = (0..len).map(|_| rng.gen_range(FIRST_CONTENT..spec.vocab_size)).collect();
                if seen.insert(meaning.clone()) {
                    dir.split_mut(split).push(Pair {
                        src: ls.render(&meaning),
                        tgt: lt.render(&meaning),
                    });
                }
            }
        }
        directions.push(dir);
    }
    Ok(Corpus {
        seed,
        vocab_size: spec.vocab_size,
        max_len: spec.max_len,
        languages,
        directions,
    })
}

fn format_tokens(xs: &[usize]) -> String {
    xs.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_tokens(s: &str, vocab: usize) -> Result<Vec<usize>> {
    s.split(' ')
        .filter(|t| !t.is_empty())
        .map(|t| {
            let v: usize = t.parse().map_err(|_| Error::input(format!("bad token `{t}`")))?;
            if v >= vocab {
                return Err(Error::input(format!("token {v} outside vocabulary of {vocab}")));
            }
            Ok(v)
        })
        .collect()
}

impl Corpus {
    pub fn language(&self, id: &str) -> Result<&SyntheticLanguage> {
        self.languages
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::UnknownLanguage(id.to_string()))
    }

    pub fn language_ids(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.id.clone()).collect()
    }

    pub fn direction(&self, src: &str, tgt: &str) -> Result<&Direction> {
        self.directions
            .iter()
            .find(|d| d.src == src && d.tgt == tgt)
            .ok_or_else(|| Error::config(format!("corpus has no direction {src}-{tgt}")))
    }

    pub fn families(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for l in &self.languages {
            out.entry(l.family.clone()).or_default().push(l.id.clone());
        }
        out
    }

    pub fn family_of(&self, id: &str) -> Result<&str> {
        Ok(&self.language(id)?.family)
    }

    /// Reference translation of `src` (in `src_lang`) into `tgt_lang`.
    pub fn translate(&self, src_lang: &str, tgt_lang: &str, src: &[usize]) -> Result<Vec<usize>> {
        let meaning = self.language(src_lang)?.read(src);
        Ok(self.language(tgt_lang)?.render(&meaning))
    }

    pub fn training_directions(&self) -> Vec<&Direction> {
        self.directions.iter().filter(|d| !d.train.is_empty()).collect()
    }

    pub fn total_train_pairs(&self) -> usize {
        self.directions.iter().map(|d| d.train.len()).sum()
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            seed: self.seed,
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            languages: self.languages.clone(),
            families: self.families(),
            directions: self
                .directions
                .iter()
                .map(|d| DirectionInfo {
                    src: d.src.clone(),
                    tgt: d.tgt.clone(),
                    zero_shot: d.zero_shot,
                    train: d.train.len(),
                    valid: d.valid.len(),
                    test: d.test.len(),
                })
                .collect(),
        }
    }

    pub fn file_name(src: &str, tgt: &str, split: Split) -> String {
        format!("{src}-{tgt}.{split}.tsv")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for d in &self.directions {
            for split in Split::ALL {
                let path = dir.join(Self::file_name(&d.src, &d.tgt, split));
                let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                let mut w = BufWriter::new(file);
                for p in d.split(split) {
                    writeln!(w, "{}\t{}", format_tokens(&p.src), format_tokens(&p.tgt)).map_err(|e| Error::io(&path, e))?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
            }
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&self.manifest())?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: CorpusManifest = serde_json::from_slice(&bytes)?;
        let mut directions = Vec::with_capacity(m.directions.len());
        for info in &m.directions {
            let mut d = Direction {
                src: info.src.clone(),
                tgt: info.tgt.clone(),
                zero_shot: info.zero_shot,
                train: Vec::new(),
                valid: Vec::new(),
                test: Vec::new(),
            };
            for split in Split::ALL {
                let path = dir.join(Self::file_name(&d.src, &d.tgt, split));
                let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
                for line in BufReader::new(file).lines() {
                    let line = line.map_err(|e| Error::io(&path, e))?;
                    if line.is_empty() {
                        continue;
                    }
                    let (s, t) = line
                        .split_once('\t')
                        .ok_or_else(|| Error::input(format!("{}: line without a tab", path.display())))?;
                    d.split_mut(split).push(Pair {
                        src: parse_tokens(s, m.vocab_size)?,
                        tgt: parse_tokens(t, m.vocab_size)?,
                    });
                }
            }
            directions.push(d);
        }
        Ok(Corpus {
            seed: m.seed,
            vocab_size: m.vocab_size,
            max_len: m.max_len,
            languages: m.languages,
            directions,
        })
    }
}

/// Sampling probabilities proportional to `size^(1/tau)`.
pub fn direction_probabilities(sizes: &[usize], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("sampling temperature must be positive, got {tau}")));
    }
    if sizes.is_empty() {
        return Err(Error::config("no directions to sample from"));
    }
    let w: Vec<f64> = sizes.iter().map(|&n| (n as f64).powf(1.0 / tau)).collect();
    let z: f64 = w.iter().sum();
    if !(z > 0.0) {
        return Err(Error::config("every direction is empty"));
    }
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Index drawn from [`direction_probabilities`].
pub fn sample_direction<R: Rng>(sizes: &[usize], tau: f64, rng: &mut R) -> Result<usize> {
    let p = direction_probabilities(sizes, tau)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(p.iter().rposition(|&x| x > 0.0).unwrap_or(0))
}

/// Model-ready batch of one direction: sources end with EOS, decoder inputs
/// start with BOS, targets end with EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: SeqBatch,
    pub tgt_in: SeqBatch,
    /// Padded like `tgt_in`.
    pub tgt_out: Vec<usize>,
}

impl Batch {
    pub fn new(src_lang: &str, tgt_lang: &str, pairs: &[&Pair]) -> Result<Self> {
        let src: Vec<Vec<usize>> = pairs.iter().map(|p| [p.src.as_slice(), &[EOS]].concat()).collect();
        let tin: Vec<Vec<usize>> = pairs.iter().map(|p| [&[BOS], p.tgt.as_slice()].concat()).collect();
        let tout: Vec<Vec<usize>> = pairs.iter().map(|p| [p.tgt.as_slice(), &[EOS]].concat()).collect();
        Ok(Batch {
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
            src: SeqBatch::new(&src)?,
            tgt_in: SeqBatch::new(&tin)?,
            tgt_out: SeqBatch::new(&tout)?.tokens,
        })
    }

    pub fn pairs(&self) -> usize {
        self.src.batch
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}

fn cost(p: &Pair) -> usize {
    p.src.len().max(p.tgt.len()) + 1
}

/// One epoch of token-budget batches over `pairs`: shuffled with
/// `(seed, epoch)`, sorted by length so batches pad little, and cut so that
/// `batch size * longest sequence <= budget`. Batch order is shuffled too.
pub fn epoch_batches(
    src_lang: &str,
    tgt_lang: &str,
    pairs: &[Pair],
    budget: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if let Some(p) = pairs.iter().find(|p| cost(p) > budget) {
        return Err(Error::Batching(format!(
            "sequence of {} tokens exceeds batch budget {budget}",
            cost(p)
        )));
    }
    let mut rng = stream(seed, Purpose::Shuffle, epoch, 0);
    let mut order: Vec<&Pair> = pairs.iter().collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|p| cost(p));
    let mut groups: Vec<Vec<&Pair>> = Vec::new();
    let mut cur: Vec<&Pair> = Vec::new();
    for p in order {
        let longest = cur.iter().map(|q| cost(q)).max().unwrap_or(0).max(cost(p));
        if !cur.is_empty() && longest * (cur.len() + 1) > budget {
            groups.push(std::mem::take(&mut cur));
        }
        cur.push(p);
    }
    if !cur.is_empty() {
        groups.push(cur);
    }
    groups.shuffle(&mut rng);
    groups.iter().map(|g| Batch::new(src_lang, tgt_lang, g)).collect()
}

/// Endless batch stream over one direction's training split.
#[derive(Clone, Debug)]
pub struct BatchStream {
    pub src_lang: String,
    pub tgt_lang: String,
    pub budget: usize,
    pub seed: u64,
    pub epoch: u64,
    pub cursor: usize,
    batches: Vec<Batch>,
}

impl BatchStream {
    pub fn new(dir: &Direction, budget: usize, seed: u64) -> Result<Self> {
        if dir.train.is_empty() {
            return Err(Error::Batching(format!("direction {} has no training pairs", dir.name())));
        }
        let batches = epoch_batches(&dir.src, &dir.tgt, &dir.train, budget, seed, 0)?;
        Ok(BatchStream {
            src_lang: dir.src.clone(),
            tgt_lang: dir.tgt.clone(),
            budget,
            seed,
            epoch: 0,
            cursor: 0,
            batches,
        })
    }

    /// Re-creates the stream position `(epoch, cursor)`.
    pub fn seek(&mut self, dir: &Direction, epoch: u64, cursor: usize) -> Result<()> {
        self.batches = epoch_batches(&dir.src, &dir.tgt, &dir.train, self.budget, self.seed, epoch)?;
        self.epoch = epoch;
        self.cursor = cursor;
        Ok(())
    }

    pub fn next_batch(&mut self, dir: &Direction) -> Result<Batch> {
        if self.cursor >= self.batches.len() {
            self.seek(dir, self.epoch + 1, 0)?;
        }
        self.cursor += 1;
        Ok(self.batches[self.cursor - 1].clone())
    }
}
