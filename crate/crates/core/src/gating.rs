//! Per-language selection logits, relaxed Bernoulli scores and top-k masks.
//!
//! Each language owns one row of logits for encoder components (used when it
//! is the source) and one for decoder components (used when it is the
//! target). Within a site, components are laid out layer by layer; inside a
//! layer the order is self-attention heads, cross-attention heads (decoder
//! only), FFN blocks, then the layer gate. Disabled kinds are absent.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Scalar, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Encoder,
    Decoder,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Site::Encoder => "encoder",
            Site::Decoder => "decoder",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Head,
    CrossHead,
    FfnBlock,
    Layer,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Head => "head",
            Kind::CrossHead => "cross_head",
            Kind::FfnBlock => "ffn_block",
            Kind::Layer => "layer",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentId {
    pub site: Site,
    pub layer: usize,
    pub kind: Kind,
    pub index: usize,
}

/// Which component kinds carry gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityKinds {
    pub head: bool,
    pub ffn: bool,
    pub layer: bool,
}

impl SparsityKinds {
    pub const ALL: SparsityKinds = SparsityKinds {
        head: true,
        ffn: true,
        layer: true,
    };
    pub const NONE: SparsityKinds = SparsityKinds {
        head: false,
        ffn: false,
        layer: false,
    };

    pub fn any(&self) -> bool {
        self.head || self.ffn || self.layer
    }
}

/// Inference budgets: layers kept per stack, heads and FFN blocks kept per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl Budgets {
    pub fn layers(&self, site: Site) -> usize {
        match site {
            Site::Encoder => self.enc_layers,
            Site::Decoder => self.dec_layers,
        }
    }
}

/// Component index space of one site.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentLayout {
    pub site: Site,
    pub layers: usize,
    pub heads: usize,
    pub blocks: usize,
    pub kinds: SparsityKinds,
}

/// Offsets of each kind within one layer's slice of a score vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSlots {
    pub start: usize,
    pub heads: Option<usize>,
    pub cross: Option<usize>,
    pub blocks: Option<usize>,
    pub layer: Option<usize>,
}

impl ComponentLayout {
    pub fn new(site: Site, layers: usize, heads: usize, blocks: usize, kinds: SparsityKinds) -> Self {
        ComponentLayout {
            site,
            layers,
            heads,
            blocks,
            kinds,
        }
    }

    fn has_cross(&self) -> bool {
        self.site == Site::Decoder && self.kinds.head
    }

    pub fn per_layer(&self) -> usize {
        let mut n = 0;
        if self.kinds.head {
            n += self.heads;
        }
        if self.has_cross() {
            n += self.heads;
        }
        if self.kinds.ffn {
            n += self.blocks;
        }
        if self.kinds.layer {
            n += 1;
        }
        n
    }

    pub fn len(&self) -> usize {
        self.layers * self.per_layer()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slots(&self, layer: usize) -> LayerSlots {
        let start = layer * self.per_layer();
        let mut at = start;
        let mut take = |enabled: bool, n: usize| {
            enabled.then(|| {
                let s = at;
                at += n;
                s
            })
        };
        LayerSlots {
            start,
            heads: take(self.kinds.head, self.heads),
            cross: take(self.has_cross(), self.heads),
            blocks: take(self.kinds.ffn, self.blocks),
            layer: take(self.kinds.layer, 1),
        }
    }

    /// All components in canonical order.
    pub fn components(&self) -> Vec<ComponentId> {
        let mut out = Vec::with_capacity(self.len());
        for layer in 0..self.layers {
            let s = self.slots(layer);
            let mut push = |slot: Option<usize>, kind: Kind, n: usize| {
                if slot.is_some() {
                    for index in 0..n {
                        out.push(ComponentId {
                            site: self.site,
                            layer,
                            kind,
                            index,
                        });
                    }
                }
            };
            push(s.heads, Kind::Head, self.heads);
            push(s.cross, Kind::CrossHead, self.heads);
            push(s.blocks, Kind::FfnBlock, self.blocks);
            push(s.layer, Kind::Layer, 1);
        }
        out
    }

    pub fn index_of(&self, id: ComponentId) -> Option<usize> {
        if id.site != self.site || id.layer >= self.layers {
            return None;
        }
        let s = self.slots(id.layer);
        let (slot, n) = match id.kind {
            Kind::Head => (s.heads, self.heads),
            Kind::CrossHead => (s.cross, self.heads),
            Kind::FfnBlock => (s.blocks, self.blocks),
            Kind::Layer => (s.layer, 1),
        };
        slot.filter(|_| id.index < n).map(|o| o + id.index)
    }

    /// Index groups that a top-k budget applies to, each with its budget.
    pub fn categories(&self, budgets: &Budgets) -> Vec<(Vec<usize>, usize)> {
        let mut out = Vec::new();
        for layer in 0..self.layers {
            let s = self.slots(layer);
            for (slot, n, k) in [
                (s.heads, self.heads, budgets.heads),
                (s.cross, self.heads, budgets.heads),
                (s.blocks, self.blocks, budgets.blocks),
            ] {
                if let Some(o) = slot {
                    out.push(((o..o + n).collect(), k));
                }
            }
        }
        if self.kinds.layer {
            let layers = (0..self.layers)
                .map(|r| self.slots(r).layer.expect("layer slot"))
                .collect();
            out.push((layers, budgets.layers(self.site)));
        }
        out
    }

    pub fn validate_budgets(&self, budgets: &Budgets) -> Result<()> {
        let d = budgets.layers(self.site);
        if d == 0 || d > self.layers {
            return Err(Error::config(format!(
                "{} layer budget {d} outside 1..={}",
                self.site, self.layers
            )));
        }
        if budgets.heads == 0 || budgets.heads > self.heads {
            return Err(Error::config(format!(
                "head budget {} outside 1..={}",
                budgets.heads, self.heads
            )));
        }
        if budgets.blocks == 0 || budgets.blocks > self.blocks {
            return Err(Error::config(format!(
                "block budget {} outside 1..={}",
                budgets.blocks, self.blocks
            )));
        }
        Ok(())
    }
}

/// Selection logits for every (language, component) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable<T> {
    pub languages: Vec<String>,
    pub encoder: ComponentLayout,
    pub decoder: ComponentLayout,
    pub mu_encoder: Vec<Vec<T>>,
    pub mu_decoder: Vec<Vec<T>>,
    pub temperature: f64,
    pub eval_temperature: f64,
    pub prior_p: f64,
}

impl<T: Scalar> ScoreTable<T> {
    /// All logits start at zero, i.e. at the prior's selection probability of 0.5.
    pub fn new(languages: Vec<String>, encoder: ComponentLayout, decoder: ComponentLayout) -> Self {
        let n = languages.len();
        ScoreTable {
            mu_encoder: vec![vec![T::zero(); encoder.len()]; n],
            mu_decoder: vec![vec![T::zero(); decoder.len()]; n],
            languages,
            encoder,
            decoder,
            temperature: 1.0,
            eval_temperature: 1.0,
            prior_p: 0.5,
        }
    }

    pub fn language_index(&self, language: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == language)
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))
    }

    pub fn layout(&self, site: Site) -> &ComponentLayout {
        match site {
            Site::Encoder => &self.encoder,
            Site::Decoder => &self.decoder,
        }
    }

    pub fn mu_row(&self, language: &str, site: Site) -> Result<&[T]> {
        let i = self.language_index(language)?;
        Ok(match site {
            Site::Encoder => &self.mu_encoder[i],
            Site::Decoder => &self.mu_decoder[i],
        })
    }

    pub fn mu_row_mut(&mut self, language: &str, site: Site) -> Result<&mut Vec<T>> {
        let i = self.language_index(language)?;
        Ok(match site {
            Site::Encoder => &mut self.mu_encoder[i],
            Site::Decoder => &mut self.mu_decoder[i],
        })
    }

    pub fn mu(&self, language: &str, id: ComponentId) -> Result<T> {
        let layout = self.layout(id.site);
        let idx = layout
            .index_of(id)
            .ok_or_else(|| Error::config(format!("component {id:?} not gated")))?;
        Ok(self.mu_row(language, id.site)?[idx])
    }

    /// Relaxed scores for one site. With `noise` (one logistic draw per
    /// component) this is the training-time Gumbel-sigmoid sample; without
    /// it, the deterministic evaluation score `sigmoid(mu / eval_temperature)`.
    pub fn sample_scores(&self, language: &str, site: Site, noise: Option<&[f64]>) -> Result<Vec<f64>> {
        let row = self.mu_row(language, site)?;
        match noise {
            Some(g) => {
                check_temperature(self.temperature)?;
                if g.len() != row.len() {
                    return Err(Error::Dimension {
                        op: "sample_scores",
                        lhs: vec![row.len()],
                        rhs: vec![g.len()],
                    });
                }
                Ok(row
                    .iter()
                    .zip(g)
                    .map(|(m, n)| sigmoid_f64((m.to_f64_lossy() + n) / self.temperature))
                    .collect())
            }
            None => {
                check_temperature(self.eval_temperature)?;
                Ok(row
                    .iter()
                    .map(|m| sigmoid_f64(m.to_f64_lossy() / self.eval_temperature))
                    .collect())
            }
        }
    }

    /// Same computation as [`sample_scores`](Self::sample_scores) recorded on
    /// a tape so that gradients reach `mu`.
    pub fn scores_on_graph(&self, g: &mut Graph<T>, mu: Var, noise: Option<&[f64]>) -> Result<Var> {
        let (x, tau) = match noise {
            Some(n) => {
                check_temperature(self.temperature)?;
                let c = g.constant(vec![n.len()], n.iter().map(|&v| T::of(v)).collect())?;
                (g.add(mu, c)?, self.temperature)
            }
            None => {
                check_temperature(self.eval_temperature)?;
                (mu, self.eval_temperature)
            }
        };
        let x = if tau == 1.0 { x } else { g.scale(x, T::of(1.0 / tau)) };
        Ok(g.sigmoid(x))
    }

    /// Number of stored selection logits.
    pub fn num_params(&self) -> usize {
        self.languages.len() * (self.encoder.len() + self.decoder.len())
    }

    /// Writes `language,site,layer,kind,index,mu,score,mask` rows using
    /// evaluation-mode scores and their top-k masks.
    pub fn write_csv<W: Write>(&self, mut w: W, budgets: &Budgets) -> Result<()> {
        let io = |e| Error::io("score csv", e);
        writeln!(w, "language,site,layer,kind,index,mu,score,mask").map_err(io)?;
        for lang in &self.languages {
            for site in [Site::Encoder, Site::Decoder] {
                let layout = self.layout(site);
                let scores = self.sample_scores(lang, site, None)?;
                let mask = top_k_mask(layout, &scores, budgets)?;
                let mu = self.mu_row(lang, site)?;
                for (i, id) in layout.components().into_iter().enumerate() {
                    writeln!(
                        w,
                        "{lang},{site},{},{},{},{},{},{}",
                        id.layer,
                        id.kind,
                        id.index,
                        mu[i].to_f64_lossy(),
                        scores[i],
                        u8::from(mask[i])
                    )
                    .map_err(io)?;
                }
            }
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be positive, got {t}")))
    }
}

pub fn sigmoid_f64(x: f64) -> f64 {
    crate::tensor::sigmoid_scalar(x)
}

/// One logistic noise draw per component: the difference of two Gumbel
/// variables, `ln u - ln(1 - u)`.
pub fn logistic_noise<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0 - f64::EPSILON);
            u.ln() - (1.0 - u).ln()
        })
        .collect()
}

/// Binary selection keeping the highest-scoring components of every
/// category. Ties go to the lower component index.
pub fn top_k_mask(layout: &ComponentLayout, scores: &[f64], budgets: &Budgets) -> Result<Vec<bool>> {
    if scores.len() != layout.len() {
        return Err(Error::Dimension {
            op: "top_k_mask",
            lhs: vec![layout.len()],
            rhs: vec![scores.len()],
        });
    }
    let mut mask = vec![false; scores.len()];
    for (members, k) in layout.categories(budgets) {
        for i in top_k(&members, scores, k)? {
            mask[i] = true;
        }
    }
    Ok(mask)
}

/// Indices of the `k` best members, ordered by descending score then
/// ascending index.
pub fn top_k(members: &[usize], scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > members.len() {
        return Err(Error::config(format!(
            "budget {k} exceeds category of {} components",
            members.len()
        )));
    }
    let mut order = members.to_vec();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// `s̄ = m ⊙ s`.
pub fn apply_hard(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(Error::Dimension {
            op: "apply_hard",
            lhs: vec![scores.len()],
            rhs: vec![mask.len()],
        });
    }
    Ok(scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { s } else { 0.0 })
        .collect())
}

/// Tape version of [`apply_hard`]: gradient reaches only surviving entries.
pub fn apply_hard_on_graph<T: Scalar>(g: &mut Graph<T>, scores: Var, mask: &[bool]) -> Result<Var> {
    let m = mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    let m = g.constant(vec![mask.len()], m)?;
    g.mul(scores, m)
}

/// Selection logits needed for `languages` languages over `layers` layers
/// with `heads` heads and `blocks` FFN blocks each.
pub fn count_selection_params(layers: usize, heads: usize, blocks: usize, languages: usize) -> usize {
    layers * heads * languages + layers * blocks * languages + layers * languages
}

/// Binary selections per language for both sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageMask {
    pub encoder: Vec<bool>,
    pub decoder: Vec<bool>,
}

impl LanguageMask {
    pub fn site(&self, site: Site) -> &[bool] {
        match site {
            Site::Encoder => &self.encoder,
            Site::Decoder => &self.decoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubNetworkMask {
    pub budgets: Budgets,
    pub languages: BTreeMap<String, LanguageMask>,
}

impl SubNetworkMask {
    /// Top-k masks from evaluation-mode scores of every language.
    pub fn from_table<T: Scalar>(table: &ScoreTable<T>, budgets: Budgets) -> Result<Self> {
        let mut languages = BTreeMap::new();
        for lang in &table.languages {
            let enc = table.sample_scores(lang, Site::Encoder, None)?;
            let dec = table.sample_scores(lang, Site::Decoder, None)?;
            languages.insert(
                lang.clone(),
                LanguageMask {
                    encoder: top_k_mask(&table.encoder, &enc, &budgets)?,
                    decoder: top_k_mask(&table.decoder, &dec, &budgets)?,
                },
            );
        }
        Ok(SubNetworkMask { budgets, languages })
    }

    pub fn get(&self, language: &str) -> Result<&LanguageMask> {
        self.languages
            .get(language)
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))
    }

    /// Checks exact budget counts in every category of every language.
    pub fn check_budgets(&self, encoder: &ComponentLayout, decoder: &ComponentLayout) -> Result<()> {
        for (lang, m) in &self.languages {
            for (layout, bits) in [(encoder, &m.encoder), (decoder, &m.decoder)] {
                if bits.len() != layout.len() {
                    return Err(Error::config(format!("{lang}: mask length mismatch")));
                }
                for (members, k) in layout.categories(&self.budgets) {
                    let on = members.iter().filter(|&&i| bits[i]).count();
                    if on != k {
                        return Err(Error::config(format!(
                            "{lang} {}: {on} selected where budget is {k}",
                            layout.site
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout(site: Site) -> ComponentLayout {
        ComponentLayout::new(site, 3, 4, 8, SparsityKinds::ALL)
    }

    fn budgets() -> Budgets {
        Budgets {
            enc_layers: 2,
            dec_layers: 2,
            heads: 3,
            blocks: 4,
        }
    }

    #[test]
    fn layout_round_trips_component_ids() {
        for site in [Site::Encoder, Site::Decoder] {
            let l = layout(site);
            let ids = l.components();
            assert_eq!(ids.len(), l.len());
            for (i, id) in ids.iter().enumerate() {
                assert_eq!(l.index_of(*id), Some(i));
            }
        }
        assert_eq!(layout(Site::Encoder).len(), 3 * (4 + 8 + 1));
        assert_eq!(layout(Site::Decoder).len(), 3 * (4 + 4 + 8 + 1));
        let heads_only = ComponentLayout::new(Site::Encoder, 2, 4, 8, SparsityKinds {
            head: true,
            ffn: false,
            layer: false,
        });
        assert_eq!(heads_only.len(), 8);
        assert_eq!(
            heads_only.index_of(ComponentId {
                site: Site::Encoder,
                layer: 0,
                kind: Kind::FfnBlock,
                index: 0
            }),
            None
        );
    }

    #[test]
    fn evaluation_scores_are_sigmoid_of_mu() {
        let mut t = ScoreTable::<f64>::new(vec!["a".into()], layout(Site::Encoder), layout(Site::Decoder));
        let s = t.sample_scores("a", Site::Encoder, None).unwrap();
        assert!(s.iter().all(|&x| x == 0.5));
        t.mu_row_mut("a", Site::Encoder).unwrap()[0] = 20.0;
        let s = t.sample_scores("a", Site::Encoder, None).unwrap();
        assert!(s[0] > 0.999);
        assert!(matches!(
            t.sample_scores("zz", Site::Encoder, None),
            Err(Error::UnknownLanguage(_))
        ));
        t.temperature = 0.0;
        let n = vec![0.0; t.encoder.len()];
        assert!(t.sample_scores("a", Site::Encoder, Some(&n)).is_err());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0, 1, 2, 3], &[0.9, 0.1, 0.7, 0.3], 2).unwrap(), vec![0, 2]);
        assert_eq!(top_k(&[0, 1, 2], &[0.5, 0.5, 0.2], 1).unwrap(), vec![0]);
        let layers = [0.2, 0.9, 0.9, 0.8, 0.1, 0.7];
        let mut chosen = top_k(&[0, 1, 2, 3, 4, 5], &layers, 4).unwrap();
        chosen.sort();
        assert_eq!(chosen, vec![1, 2, 3, 5]);
        assert!(matches!(top_k(&[0, 1], &[0.1, 0.2], 3), Err(Error::Config(_))));
    }

    #[test]
    fn apply_hard_examples() {
        assert_eq!(apply_hard(&[0.9, 0.2], &[true, false]).unwrap(), vec![0.9, 0.0]);
        assert_eq!(apply_hard(&[0.9, 0.2], &[true, true]).unwrap(), vec![0.9, 0.2]);
        assert_eq!(apply_hard(&[0.9, 0.2], &[false, false]).unwrap(), vec![0.0, 0.0]);
        assert!(apply_hard(&[0.9], &[true, false]).is_err());
    }

    #[test]
    fn apply_hard_on_graph_blocks_gradient_of_masked_entries() {
        let mut g = Graph::<f64>::new();
        let s = g.param_from(vec![3], vec![0.9, 0.2, 0.4]);
        let sb = apply_hard_on_graph(&mut g, s, &[true, false, true]).unwrap();
        assert_eq!(g.data(sb), &[0.9, 0.0, 0.4]);
        let l = g.sum(sb);
        g.backward(l).unwrap();
        assert_eq!(g.grad(s).unwrap(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn selection_param_counts() {
        assert_eq!(count_selection_params(4, 4, 8, 3), 156);
        assert_eq!(count_selection_params(4, 4, 8, 0), 0);
        assert_eq!(count_selection_params(1, 1, 1, 1), 3);
    }

    #[test]
    fn csv_export_has_one_row_per_component() {
        let t = ScoreTable::<f32>::new(
            vec!["a".into(), "b".into()],
            layout(Site::Encoder),
            layout(Site::Decoder),
        );
        let mut buf = Vec::new();
        t.write_csv(&mut buf, &budgets()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "language,site,layer,kind,index,mu,score,mask");
        assert_eq!(lines.len(), 1 + 2 * (t.encoder.len() + t.decoder.len()));
        assert_eq!(lines[1], "a,encoder,0,head,0,0,0.5,1");
    }

    #[test]
    fn training_noise_is_reproducible_per_stream() {
        use crate::rng::{stream, Purpose};
        let a = logistic_noise(16, &mut stream(3, Purpose::Gumbel, 1, 0));
        let b = logistic_noise(16, &mut stream(3, Purpose::Gumbel, 1, 0));
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.is_finite()));
    }

    fn arb_scores(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![0.0f64..1.0, Just(0.5)], n)
    }

    proptest! {
        #[test]
        fn top_k_mask_meets_budgets_exactly(scores in arb_scores(3 * 17)) {
            let l = layout(Site::Decoder);
            let mask = top_k_mask(&l, &scores, &budgets()).unwrap();
            for (members, k) in l.categories(&budgets()) {
                prop_assert_eq!(members.iter().filter(|&&i| mask[i]).count(), k);
            }
            prop_assert_eq!(mask.iter().filter(|&&b| b).count(), 3 * (3 + 3 + 4) + 2);
        }

        #[test]
        fn raising_a_score_never_deselects_it(
            scores in arb_scores(3 * 13),
            which in 0usize..39,
            bump in 0.0f64..10.0,
        ) {
            let l = layout(Site::Encoder);
            let before = top_k_mask(&l, &scores, &budgets()).unwrap();
            let mut raised = scores.clone();
            raised[which] += bump;
            let after = top_k_mask(&l, &raised, &budgets()).unwrap();
            if before[which] {
                prop_assert!(after[which]);
            }
        }
    }
}
