use std::collections::BTreeMap;

use proptest::prelude::*;
use sparse_mt::analysis::*;
use sparse_mt::corpus::{CorpusManifest, DirectionInfo, Order, Split, SyntheticLanguage, Tier};
use sparse_mt::gating::{Budgets, ComponentLayout, LanguageMask, Site, SparsityKinds, SubNetworkMask};

const HEADS: SparsityKinds = SparsityKinds {
    head: true,
    ffn: false,
    layer: false,
};
const BLOCKS: SparsityKinds = SparsityKinds {
    head: false,
    ffn: true,
    layer: false,
};
use sparse_mt::inference::{DirectionScore, EvalReport, ParamCount};
use sparse_mt::Error;

fn lv(language: &str, scores: &[f64]) -> LanguageVector {
    LanguageVector {
        language: language.into(),
        scores: scores.to_vec(),
    }
}

fn families(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(l, f)| (l.to_string(), f.to_string())).collect()
}

#[test]
fn two_points_land_symmetric_on_first_axis() {
    let p = pca_project(&[lv("a", &[0.0, 0.0, 1.0]), lv("b", &[3.0, 4.0, 1.0])], 2).unwrap();
    assert!(!p.degenerate);
    assert_eq!(p.normalization, "mean-centered");
    assert!((p.coords[0][0].abs() - 2.5).abs() < 1e-12);
    assert!((p.coords[0][0] + p.coords[1][0]).abs() < 1e-12);
    assert!(p.coords[0][1].abs() < 1e-12 && p.coords[1][1].abs() < 1e-12);
    assert!((p.variances[0] - 12.5).abs() < 1e-12);
    // largest loading (0.8 on the second coordinate) is positive, so b is on the right
    assert!(p.coords[1][0] > 0.0);
}

#[test]
fn identical_vectors_are_degenerate() {
    let p = pca_project(&[lv("a", &[0.3, 0.7]), lv("b", &[0.3, 0.7]), lv("c", &[0.3, 0.7])], 2).unwrap();
    assert!(p.degenerate);
    assert!(p.coords.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn pca_rejects_bad_shapes() {
    assert!(matches!(pca_project(&[lv("a", &[1.0, 2.0])], 2), Err(Error::Input(_))));
    assert!(matches!(pca_project(&[lv("a", &[1.0]), lv("b", &[2.0])], 2), Err(Error::Input(_))));
    assert!(matches!(pca_project(&[lv("a", &[1.0, 2.0]), lv("b", &[2.0])], 1), Err(Error::Input(_))));
}

fn rotate(v: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = v.to_vec();
    out[0] = c * v[0] - s * v[1];
    out[1] = s * v[0] + c * v[1];
    out
}

proptest! {
    #[test]
    fn full_rank_projection_preserves_distances(
        pts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 4..7),
        angle in 0.0f64..6.28,
    ) {
        let vs: Vec<LanguageVector> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| lv(&format!("l{i}"), &rotate(p, angle)))
            .collect();
        let p = pca_project(&vs, 3).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let orig: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum();
                let proj: f64 = p.coords[i].iter().zip(&p.coords[j]).map(|(a, b)| (a - b).powi(2)).sum();
                prop_assert!((orig.sqrt() - proj.sqrt()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded(
        a in prop::collection::vec(any::<bool>(), 12),
        b in prop::collection::vec(any::<bool>(), 12),
    ) {
        let ab = jaccard(&a, &b).unwrap();
        prop_assert_eq!(ab, jaccard(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
    }
}

#[test]
fn csv_and_svg_outputs() {
    let p = pca_project(&[lv("a", &[0.0, 0.0]), lv("b", &[1.0, 0.0]), lv("c", &[0.0, 2.0])], 2).unwrap();
    let csv = projection_csv(&p).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "language,x,y");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("c,"));
    let fam = families(&[("a", "f1"), ("b", "f1"), ("c", "f2")]);
    let svg = projection_svg(&p, &fam).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("#1f77b4").count(), 3);
    assert_eq!(svg.matches("#d62728").count(), 2);
    assert!(matches!(projection_svg(&p, &families(&[("a", "f1")])), Err(Error::Config(_))));
}

#[test]
fn toy_jaccard_by_hand() {
    assert_eq!(jaccard(&[true, true, false, false], &[false, true, true, false]).unwrap(), 1.0 / 3.0);
    assert_eq!(jaccard(&[true, false, false, false], &[false, false, false, true]).unwrap(), 0.0);
    assert_eq!(jaccard(&[false; 4], &[false; 4]).unwrap(), 1.0);
    assert!(jaccard(&[true], &[true, false]).is_err());
}

#[test]
fn overlap_splits_within_and_cross_family() {
    let m = |e: [bool; 4], d: [bool; 2]| LanguageMask {
        encoder: e.to_vec(),
        decoder: d.to_vec(),
    };
    let mut languages = BTreeMap::new();
    languages.insert("a".to_string(), m([true, true, false, false], [true, false]));
    languages.insert("b".to_string(), m([true, true, false, false], [false, true]));
    languages.insert("c".to_string(), m([false, false, true, true], [true, false]));
    let mask = SubNetworkMask {
        budgets: Budgets {
            enc_layers: 1,
            dec_layers: 1,
            heads: 1,
            blocks: 1,
        },
        languages,
    };
    let enc = ComponentLayout::new(Site::Encoder, 1, 4, 1, HEADS);
    let dec = ComponentLayout::new(Site::Decoder, 1, 1, 2, BLOCKS);
    let o = selection_overlap(&mask, &enc, &dec, &families(&[("a", "x"), ("b", "x"), ("c", "y")])).unwrap();
    assert_eq!(o.languages, ["a", "b", "c"]);
    assert_eq!(o.matrix[0][1], 0.5);
    assert_eq!(o.matrix[0][2], 0.2);
    assert_eq!(o.matrix[1][2], 0.0);
    assert_eq!(o.within_family, Some(0.5));
    assert_eq!(o.cross_family, Some(0.1));
    let csv = overlap_csv(&o);
    assert_eq!(csv.lines().next().unwrap(), "language,a,b,c");
    assert_eq!(csv.lines().nth(1).unwrap(), "a,1.000000,0.500000,0.200000");
}

fn language(id: &str, tier: Tier) -> SyntheticLanguage {
    SyntheticLanguage {
        id: id.into(),
        family: "f".into(),
        tier,
        order: Order::Copy,
        cipher: vec![],
    }
}

fn direction(src: &str, tgt: &str, bleu: f64) -> DirectionScore {
    DirectionScore {
        src: src.into(),
        tgt: tgt.into(),
        zero_shot: false,
        bleu,
        sentences: 10,
    }
}

#[test]
fn resource_tiers_take_the_weaker_language() {
    let manifest = CorpusManifest {
        seed: 0,
        vocab_size: 16,
        max_len: 8,
        languages: vec![language("h", Tier::High), language("m", Tier::Medium), language("l", Tier::Low)],
        families: BTreeMap::new(),
        directions: Vec::<DirectionInfo>::new(),
    };
    let report = EvalReport {
        model: "toy".into(),
        split: Split::Test,
        directions: vec![direction("h", "m", 30.0), direction("m", "h", 40.0), direction("h", "l", 10.0)],
        averages: BTreeMap::new(),
        params: ParamCount::default(),
        throughput: None,
    };
    let b = resource_breakdown(&report, &manifest).unwrap();
    assert_eq!(b.len(), 2);
    assert_eq!(b[&Tier::Medium], 35.0);
    assert_eq!(b[&Tier::Low], 10.0);
    assert!(!b.contains_key(&Tier::High));

    let mut broken = report.clone();
    broken.directions.push(direction("h", "zz", 1.0));
    assert!(matches!(resource_breakdown(&broken, &manifest), Err(Error::Config(_))));
}

#[test]
fn duplicate_vectors_share_coordinates() {
    let p = pca_project(&[lv("a", &[0.1, 0.9, 0.4]), lv("b", &[0.7, 0.2, 0.4]), lv("c", &[0.1, 0.9, 0.4])], 2).unwrap();
    assert_eq!(p.coords[0], p.coords[2]);
    assert_ne!(p.coords[0], p.coords[1]);
}

#[test]
fn single_tier_mean_is_the_global_mean() {
    let manifest = CorpusManifest {
        seed: 0,
        vocab_size: 16,
        max_len: 8,
        languages: vec![language("a", Tier::Medium), language("b", Tier::Medium)],
        families: BTreeMap::new(),
        directions: Vec::new(),
    };
    let dirs = vec![direction("a", "b", 12.0), direction("b", "a", 20.0)];
    let report = EvalReport {
        model: "toy".into(),
        split: Split::Test,
        averages: sparse_mt::inference::task_averages(&dirs, None),
        directions: dirs,
        params: ParamCount::default(),
        throughput: None,
    };
    let b = resource_breakdown(&report, &manifest).unwrap();
    assert_eq!(b.len(), 1);
    assert_eq!(b[&Tier::Medium], report.averages["all"]);
}

#[test]
fn dropped_layers_take_their_components_with_them() {
    // two encoder layers of [head, head, block, block, layer gate]
    let layout = ComponentLayout::new(Site::Encoder, 2, 2, 2, SparsityKinds::ALL);
    let bits = [true, false, true, true, false, false, true, true, false, true];
    let kept = effective_selection(&bits, &layout).unwrap();
    assert_eq!(kept, [false, false, false, false, false, false, true, true, false, true]);
    let other = [true, false, true, true, true, true, false, true, false, false];
    // kept sets: {6,7,9} and {0,2,3,4}
    let a = effective_selection(&other, &layout).unwrap();
    assert_eq!(jaccard(&kept, &a).unwrap(), 0.0);
    assert!(effective_selection(&bits[..9], &layout).is_err());
}
