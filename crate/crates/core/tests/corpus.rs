use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparse_mt::corpus::*;
use sparse_mt::model::PAD;
use sparse_mt::Error;

fn small_spec() -> CorpusSpec {
    let mut spec = CorpusSpec::desk();
    for v in spec.tier_sizes.values_mut() {
        *v /= 10;
    }
    spec
}

#[test]
fn orders_are_involutions() {
    let xs = [3, 4, 5, 6, 7];
    assert_eq!(Order::Reverse.apply(&xs), vec![7, 6, 5, 4, 3]);
    assert_eq!(Order::LocalSwap.apply(&xs), vec![4, 3, 6, 5, 7]);
    for o in [Order::Copy, Order::Reverse, Order::LocalSwap] {
        assert_eq!(o.apply(&o.apply(&xs)), xs.to_vec());
    }
}

#[test]
fn copy_languages_without_cipher_translate_by_copying() {
    let spec = CorpusSpec {
        vocab_size: 16,
        min_len: 2,
        max_len: 5,
        families: vec![FamilySpec {
            name: "c".into(),
            order: Order::Copy,
            cipher: false,
        }],
        languages: ["x", "y"]
            .iter()
            .map(|id| LanguageSpec {
                id: id.to_string(),
                family: "c".into(),
                tier: Tier::High,
                swaps: 0,
            })
            .collect(),
        tier_sizes: [(Tier::High, 30)].into(),
        valid_per_direction: 5,
        test_per_direction: 5,
        directions: vec![],
        zero_shot: vec![],
    };
    let c = generate(&spec, 1).unwrap();
    for p in &c.direction("x", "y").unwrap().train {
        assert_eq!(p.src, p.tgt);
    }
}

#[test]
fn reverse_family_without_cipher_reverses_copy_family() {
    let mut spec = small_spec();
    for f in &mut spec.families {
        f.cipher = false;
    }
    for l in &mut spec.languages {
        l.swaps = 0;
    }
    let c = generate(&spec, 2).unwrap();
    for p in &c.direction("fa", "ra").unwrap().test {
        let mut rev = p.src.clone();
        rev.reverse();
        assert_eq!(p.tgt, rev);
    }
}

#[test]
fn pairs_follow_the_language_transforms() {
    let c = generate(&small_spec(), 3).unwrap();
    for d in &c.directions {
        for p in d.train.iter().chain(&d.test) {
            assert_eq!(c.translate(&d.src, &d.tgt, &p.src).unwrap(), p.tgt);
            assert_eq!(c.translate(&d.tgt, &d.src, &p.tgt).unwrap(), p.src);
        }
    }
}

#[test]
fn desk_corpus_has_the_declared_shape() {
    let c = generate(&CorpusSpec::desk(), 0).unwrap();
    assert_eq!(c.languages.len(), 6);
    assert_eq!(c.families().len(), 2);
    assert_eq!(c.directions.len(), 30);
    let total = c.total_train_pairs();
    assert!((18_000..=22_000).contains(&total), "{total}");
    let zs: Vec<_> = c.directions.iter().filter(|d| d.zero_shot).collect();
    assert_eq!(zs.len(), 1);
    assert!(zs[0].train.is_empty() && !zs[0].test.is_empty());
    assert!(c.directions.iter().all(|d| d.zero_shot || !d.train.is_empty()));
}

#[test]
fn splits_are_disjoint() {
    let c = generate(&small_spec(), 4).unwrap();
    for d in &c.directions {
        let train: HashSet<&Vec<usize>> = d.train.iter().map(|p| &p.src).collect();
        let valid: HashSet<&Vec<usize>> = d.valid.iter().map(|p| &p.src).collect();
        assert_eq!(train.len(), d.train.len());
        for p in d.valid.iter().chain(&d.test) {
            assert!(!train.contains(&p.src));
        }
        for p in &d.test {
            assert!(!valid.contains(&p.src));
        }
    }
}

#[test]
fn families_are_separable_by_word_order() {
    // Reading a sentence with each family's order and the language's own
    // cipher recovers the same meaning only for the true family.
    let c = generate(&small_spec(), 5).unwrap();
    let d = c.direction("fa", "ra").unwrap();
    for p in &d.test {
        let meaning = c.language("fa").unwrap().read(&p.src);
        let ra = c.language("ra").unwrap();
        assert_eq!(ra.read(&p.tgt), meaning);
        let mut wrong = ra.clone();
        wrong.order = Order::Copy;
        if meaning.len() > 1 && meaning.iter().rev().ne(meaning.iter()) {
            assert_ne!(wrong.read(&p.tgt), meaning);
        }
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let spec = small_spec();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&spec, 9).unwrap().save(a.path()).unwrap();
    generate(&spec, 9).unwrap().save(b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 30 * 3 + 1);
    for n in &names {
        assert_eq!(
            std::fs::read(a.path().join(n)).unwrap(),
            std::fs::read(b.path().join(n)).unwrap()
        );
    }
    let loaded = Corpus::load(a.path()).unwrap();
    assert_eq!(loaded, generate(&spec, 9).unwrap());
    assert_ne!(generate(&spec, 10).unwrap().directions[0].train, loaded.directions[0].train);
}

#[test]
fn file_format_is_tab_separated_token_ids() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate(&small_spec(), 1).unwrap();
    c.save(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(Corpus::file_name("fa", "rb", Split::Test))).unwrap();
    let first = text.lines().next().unwrap();
    let (s, t) = first.split_once('\t').unwrap();
    let p = &c.direction("fa", "rb").unwrap().test[0];
    assert_eq!(s.split(' ').map(|x| x.parse::<usize>().unwrap()).collect::<Vec<_>>(), p.src);
    assert_eq!(t.split(' ').map(|x| x.parse::<usize>().unwrap()).collect::<Vec<_>>(), p.tgt);
}

#[test]
fn unknown_languages_are_configuration_errors() {
    let mut spec = small_spec();
    spec.zero_shot = vec![["fa".into(), "zz".into()]];
    assert!(matches!(generate(&spec, 0), Err(Error::UnknownLanguage(_))));
    let mut spec = small_spec();
    spec.languages[0].family = "nope".into();
    assert!(matches!(generate(&spec, 0), Err(Error::Config(_))));
}

#[test]
fn direction_sampling_probabilities() {
    let p = direction_probabilities(&[100, 10], 5.0).unwrap();
    assert!((p[0] - 0.613).abs() < 1e-3 && (p[1] - 0.387).abs() < 1e-3, "{p:?}");
    assert_eq!(direction_probabilities(&[42], 5.0).unwrap(), vec![1.0]);
    let flat = direction_probabilities(&[1, 1000, 50], 1e9).unwrap();
    assert!(flat.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-6));
    assert!(direction_probabilities(&[1], 0.0).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut hits = [0usize; 2];
    for _ in 0..20_000 {
        hits[sample_direction(&[100, 10], 5.0, &mut rng).unwrap()] += 1;
    }
    assert!((hits[0] as f64 / 20_000.0 - 0.613).abs() < 0.015);
}

#[test]
fn budget_equal_to_one_sequence_gives_singletons() {
    let pairs = vec![
        Pair {
            src: vec![3, 4, 5],
            tgt: vec![6, 7, 8],
        },
        Pair {
            src: vec![3, 4],
            tgt: vec![6, 7, 8],
        },
    ];
    let batches = epoch_batches("a", "b", &pairs, 4, 0, 0).unwrap();
    assert_eq!(batches.len(), 2);
    assert!(batches.iter().all(|b| b.pairs() == 1));
    assert!(matches!(epoch_batches("a", "b", &pairs, 3, 0, 0), Err(Error::Batching(_))));
}

#[test]
fn batches_shape_sources_and_targets() {
    let pairs = vec![Pair {
        src: vec![9, 8],
        tgt: vec![7, 6, 5],
    }];
    let b = &epoch_batches("a", "b", &pairs, 64, 0, 0).unwrap()[0];
    assert_eq!(b.src.tokens, vec![9, 8, 2]);
    assert_eq!(b.tgt_in.tokens, vec![1, 7, 6, 5]);
    assert_eq!(b.tgt_out, vec![7, 6, 5, 2]);
}

proptest! {
    #[test]
    fn every_target_token_appears_once_per_epoch(seed in 0u64..1000, budget in 10usize..80, epoch in 0u64..4) {
        let c = generate(&small_spec(), seed % 7).unwrap();
        let d = &c.directions[(seed % 29) as usize];
        let batches = epoch_batches(&d.src, &d.tgt, &d.train, budget, seed, epoch).unwrap();
        let expected: usize = d.train.iter().map(|p| p.tgt.len() + 1).sum();
        let seen: usize = batches.iter().map(|b| b.target_tokens()).sum();
        prop_assert_eq!(seen, expected);
        let pairs: usize = batches.iter().map(|b| b.pairs()).sum();
        prop_assert_eq!(pairs, d.train.len());
        for b in &batches {
            prop_assert!(b.pairs() * b.tgt_in.len <= budget);
            prop_assert!(b.tgt_out.len() == b.tgt_in.tokens.len());
            prop_assert!(b.tgt_in.tokens.iter().zip(&b.tgt_out).all(|(i, o)| (*i == PAD) == (*o == PAD)));
        }
        let again = epoch_batches(&d.src, &d.tgt, &d.train, budget, seed, epoch).unwrap();
        prop_assert_eq!(again, batches);
    }
}

#[test]
fn zero_shot_directions_cannot_stream_batches() {
    let c = generate(&small_spec(), 0).unwrap();
    let zs = c.directions.iter().find(|d| d.zero_shot).unwrap();
    assert!(matches!(BatchStream::new(zs, 64, 0), Err(Error::Batching(_))));
    let d = &c.directions[0];
    let mut s = BatchStream::new(d, 64, 0).unwrap();
    let n = epoch_batches(&d.src, &d.tgt, &d.train, 64, 0, 0).unwrap().len();
    for _ in 0..n + 1 {
        s.next_batch(d).unwrap();
    }
    assert_eq!((s.epoch, s.cursor), (1, 1));
}
