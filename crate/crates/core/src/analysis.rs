//! Sparsity-pattern analysis: score-vector PCA, selection overlap and
//! BLEU by resource tier.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, Tier};
use crate::gating::{ComponentLayout, ScoreTable, Site, SubNetworkMask};
use crate::inference::EvalReport;
use crate::tensor::Scalar;
use crate::{Error, Result};

/// Evaluation-mode scores of one language: encoder components, then decoder
/// components, each in layout order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageVector {
    pub language: String,
    pub scores: Vec<f64>,
}

pub fn language_vectors<T: Scalar>(table: &ScoreTable<T>) -> Result<Vec<LanguageVector>> {
    table
        .languages
        .iter()
        .map(|l| {
            let mut scores = table.sample_scores(l, Site::Encoder, None)?;
            scores.extend(table.sample_scores(l, Site::Decoder, None)?);
            Ok(LanguageVector {
                language: l.clone(),
                scores,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub languages: Vec<String>,
    pub coords: Vec<Vec<f64>>,
    /// Variance along each kept axis.
    pub variances: Vec<f64>,
    /// All vectors identical: nothing to project, coordinates are zero.
    pub degenerate: bool,
    pub normalization: String,
}

const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Projects mean-centered vectors onto the top `dims` eigenvectors of their
/// covariance. Each axis is signed so that its largest-magnitude loading is
/// positive.
pub fn pca_project(vectors: &[LanguageVector], dims: usize) -> Result<Projection> {
    if vectors.len() < 2 {
        return Err(Error::input("PCA needs at least two languages"));
    }
    let d = vectors[0].scores.len();
    if vectors.iter().any(|v| v.scores.len() != d) {
        return Err(Error::input("language vectors differ in dimension"));
    }
    if dims == 0 || d < dims {
        return Err(Error::input(format!("cannot project {d}-dimensional vectors onto {dims} axes")));
    }
    let n = vectors.len();
    let mut x = DMatrix::from_fn(n, d, |i, j| vectors[i].scores[j]);
    for j in 0..d {
        let mean = x.column(j).sum() / n as f64;
        for i in 0..n {
            x[(i, j)] -= mean;
        }
    }
    let languages = vectors.iter().map(|v| v.language.clone()).collect();
    let normalization = "mean-centered".to_string();
    let total: f64 = x.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
    if total < DEGENERATE_VARIANCE {
        return Ok(Projection {
            languages,
            coords: vec![vec![0.0; dims]; n],
            variances: vec![0.0; dims],
            degenerate: true,
            normalization,
        });
    }
    let cov = x.transpose() * &x / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut coords = vec![vec![0.0; dims]; n];
    let mut variances = Vec::with_capacity(dims);
    for (k, &axis) in order.iter().take(dims).enumerate() {
        let mut v = eig.eigenvectors.column(axis).into_owned();
        let pivot = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if pivot < 0.0 {
            v = -v;
        }
        let proj = &x * v;
        for i in 0..n {
            coords[i][k] = proj[i];
        }
        variances.push(eig.eigenvalues[axis].max(0.0));
    }
    Ok(Projection {
        languages,
        coords,
        variances,
        degenerate: false,
        normalization,
    })
}

/// `language,x,y` rows of a two-dimensional projection.
pub fn projection_csv(p: &Projection) -> Result<String> {
    let mut s = String::from("language,x,y\n");
    for (l, c) in p.languages.iter().zip(&p.coords) {
        if c.len() < 2 {
            return Err(Error::input("CSV output needs two axes"));
        }
        let _ = writeln!(s, "{l},{},{}", c[0], c[1]);
    }
    Ok(s)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Scatter plot of a two-dimensional projection, one color per family.
pub fn projection_svg(p: &Projection, family_of: &BTreeMap<String, String>) -> Result<String> {
    let (w, h, pad) = (480.0, 480.0, 48.0);
    let xs: Vec<f64> = p.coords.iter().map(|c| c[0]).collect();
    let ys: Vec<f64> = p.coords.iter().map(|c| c.get(1).copied().unwrap_or(0.0)).collect();
    let span = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            (lo - 1.0, hi + 1.0)
        } else {
            (lo, hi)
        }
    };
    let ((x0, x1), (y0, y1)) = (span(&xs), span(&ys));
    let families: Vec<&String> = {
        let mut f: Vec<&String> = family_of.values().collect();
        f.sort();
        f.dedup();
        f
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (i, lang) in p.languages.iter().enumerate() {
        let fam = family_of
            .get(lang)
            .ok_or_else(|| Error::config(format!("language {lang} has no family")))?;
        let color = PALETTE[families.iter().position(|f| *f == fam).unwrap_or(0) % PALETTE.len()];
        let cx = pad + (xs[i] - x0) / (x1 - x0) * (w - 2.0 * pad);
        let cy = h - pad - (ys[i] - y0) / (y1 - y0) * (h - 2.0 * pad);
        let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="6" fill="{color}"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{lang}</text>"#,
            cx + 8.0,
            cy + 4.0
        );
    }
    for (k, fam) in families.iter().enumerate() {
        let y = 20.0 + 16.0 * k as f64;
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(s, r#"<circle cx="16" cy="{y}" r="5" fill="{color}"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="26" y="{:.0}" font-family="sans-serif" font-size="12">{fam}</text>"#,
            y + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Jaccard similarity of two selections; two empty selections are identical.
pub fn jaccard(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input("selections differ in length"));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub languages: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub within_family: Option<f64>,
    pub cross_family: Option<f64>,
}

/// Components that survive extraction: a dropped layer takes its heads and
/// blocks with it.
pub fn effective_selection(bits: &[bool], layout: &ComponentLayout) -> Result<Vec<bool>> {
    if bits.len() != layout.len() {
        return Err(Error::input("selection does not match its layout"));
    }
    let mut out = bits.to_vec();
    let per = layout.per_layer();
    for layer in 0..layout.layers {
        if let Some(g) = layout.slots(layer).layer {
            if !bits[g] {
                out[layer * per..(layer + 1) * per].fill(false);
            }
        }
    }
    Ok(out)
}

/// Pairwise Jaccard similarity of the encoder plus decoder components each
/// language keeps after extraction.
pub fn selection_overlap(
    mask: &SubNetworkMask,
    encoder: &ComponentLayout,
    decoder: &ComponentLayout,
    family_of: &BTreeMap<String, String>,
) -> Result<Overlap> {
    let languages: Vec<String> = mask.languages.keys().cloned().collect();
    let sets: Vec<Vec<bool>> = mask
        .languages
        .values()
        .map(|m| {
            let mut v = effective_selection(&m.encoder, encoder)?;
            v.extend(effective_selection(&m.decoder, decoder)?);
            Ok(v)
        })
        .collect::<Result<_>>()?;
    let n = languages.len();
    let mut matrix = vec![vec![1.0; n]; n];
    let (mut within, mut cross) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in i + 1..n {
            let v = jaccard(&sets[i], &sets[j])?;
            matrix[i][j] = v;
            matrix[j][i] = v;
            let fam = |l: &String| {
                family_of
                    .get(l)
                    .ok_or_else(|| Error::config(format!("language {l} has no family")))
            };
            if fam(&languages[i])? == fam(&languages[j])? {
                within.push(v);
            } else {
                cross.push(v);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(Overlap {
        within_family: mean(&within),
        cross_family: mean(&cross),
        languages,
        matrix,
    })
}

pub fn overlap_csv(o: &Overlap) -> String {
    let mut s = format!("language,{}\n", o.languages.join(","));
    for (l, row) in o.languages.iter().zip(&o.matrix) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "{l},{}", cells.join(","));
    }
    s
}

/// Mean BLEU per resource tier. A direction belongs to the lower-resource
/// tier of its two languages; tiers without directions are absent.
pub fn resource_breakdown(report: &EvalReport, manifest: &CorpusManifest) -> Result<BTreeMap<Tier, f64>> {
    let tier = |l: &str| {
        manifest
            .languages
            .iter()
            .find(|x| x.id == l)
            .map(|x| x.tier)
            .ok_or_else(|| Error::config(format!("language {l} has no resource tier")))
    };
    let mut acc: BTreeMap<Tier, (f64, usize)> = BTreeMap::new();
    for d in &report.directions {
        let t = tier(&d.src)?.max(tier(&d.tgt)?);
        let e = acc.entry(t).or_insert((0.0, 0));
        e.0 += d.bleu;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect())
}
