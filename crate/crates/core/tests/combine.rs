use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unitlab::combine::*;
use unitlab::corpus::{parse_lexicon, FeatureSequence};
use unitlab::decode::{Hypothesis, NBestList};
use unitlab::eval::{oracle_wer, wer};
use unitlab::neural::{LasConfig, LasModel};
use unitlab::units::*;

/// Scores from a table keyed by the joined words; missing entries fail.
struct Table {
    name: &'static str,
    scores: BTreeMap<String, f64>,
}

impl Table {
    fn new(name: &'static str, pairs: &[(&str, f64)]) -> Self {
        Self { name, scores: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect() }
    }
}

impl Rescorer for Table {
    fn name(&self) -> &str {
        self.name
    }

    fn score(&self, _: &FeatureSequence, words: &[String]) -> Result<f64> {
        self.scores
            .get(&words.join(" "))
            .copied()
            .ok_or_else(|| CombineError::Conversion { rescorer: self.name.into(), words: words.to_vec() })
    }
}

/// Deterministic pseudo-score from the words.
struct Hash(&'static str, u64);

impl Rescorer for Hash {
    fn name(&self) -> &str {
        self.0
    }

    fn score(&self, _: &FeatureSequence, words: &[String]) -> Result<f64> {
        let mut h = self.1;
        for b in words.join(" ").bytes() {
            h = h.wrapping_mul(6364136223846793005).wrapping_add(b as u64 + 1);
        }
        Ok(-((h >> 11) as f64 / (1u64 << 53) as f64) * 10.0)
    }
}

fn w(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn nbest(id: &str, hyps: &[(&str, f64)]) -> NBestList {
    NBestList {
        utt_id: id.into(),
        hyps: hyps
            .iter()
            .map(|(s, t)| Hypothesis { words: w(s), units: vec![], total: *t, components: BTreeMap::new() })
            .collect(),
    }
}

fn feats() -> FeatureSequence {
    FeatureSequence::new(1, 1, vec![0.0]).unwrap()
}

fn weights(pairs: &[(&str, f64)]) -> CombinationWeights {
    CombinationWeights::from_pairs(pairs.iter().copied()).unwrap()
}

fn words_of(l: &NBestList) -> Vec<String> {
    l.hyps.iter().map(|h| h.words.join(" ")).collect()
}

#[test]
fn rescoring_arithmetic() {
    let l = nbest("u", &[("a", -1.0), ("b", -2.0)]);
    let r = Table::new("x", &[("a", -5.0), ("b", -1.0)]);
    let out = rescore_nbest(&l, &feats(), &[&r], &weights(&[("x", 1.0)])).unwrap();
    assert_eq!(words_of(&out), ["b", "a"]);
    assert_eq!(out.hyps[0].total, -3.0);
    assert_eq!(out.hyps[1].total, -6.0);
    assert_eq!(out.hyps[0].components["x"], -1.0);
    assert!(rescore_nbest(&nbest("e", &[]), &feats(), &[&r], &weights(&[("x", 1.0)])).is_err());
    assert!(matches!(rescore_nbest(&l, &feats(), &[&r], &weights(&[])), Err(CombineError::MissingWeight(_))));
    assert!(matches!(rescore_nbest(&l, &feats(), &[&r, &r], &weights(&[("x", 1.0)])), Err(CombineError::DuplicateName(_))));
}

#[test]
fn failed_hypotheses_sink_but_stay() {
    let l = nbest("u", &[("oov", -0.5), ("a", -1.0), ("b", -2.0)]);
    let r = Table::new("x", &[("a", -1.0), ("b", -1.0)]);
    let out = rescore_nbest(&l, &feats(), &[&r], &weights(&[("x", 0.5)])).unwrap();
    assert_eq!(words_of(&out), ["a", "b", "oov"]);
    assert_eq!(out.hyps[2].total, f64::NEG_INFINITY);
    let same = rescore_nbest(&l, &feats(), &[&r], &weights(&[("x", 0.0)])).unwrap();
    assert_eq!(words_of(&same), words_of(&l));
    assert_eq!(same.hyps[0].total, -0.5);
}

#[test]
fn stable_on_ties() {
    let l = nbest("u", &[("a", -1.0), ("b", -1.0), ("c", -1.0)]);
    let r = Table::new("x", &[("a", -2.0), ("b", -1.0), ("c", -1.0)]);
    let out = rescore_nbest(&l, &feats(), &[&r], &weights(&[("x", 1.0)])).unwrap();
    assert_eq!(words_of(&out), ["b", "c", "a"]);
}

fn random_list(rng: &mut ChaCha8Rng, id: &str, n: usize) -> NBestList {
    use rand::Rng;
    let vocab = ["a", "b", "c", "d"];
    let mut hyps: Vec<Hypothesis> = (0..n)
        .map(|_| {
            let len = rng.random_range(0..4);
            Hypothesis {
                words: (0..len).map(|_| vocab[rng.random_range(0..4)].to_string()).collect(),
                units: vec![],
                total: -rng.random_range(0.0..10.0f64),
                components: BTreeMap::new(),
            }
        })
        .collect();
    hyps.sort_by(|a, b| b.total.total_cmp(&a.total));
    NBestList { utt_id: id.into(), hyps }
}

proptest! {
    #[test]
    fn zero_weights_are_identity(seed in 0u64..1000, n in 1usize..9) {
        let l = random_list(&mut ChaCha8Rng::seed_from_u64(seed), "u", n);
        let out = rescore_nbest(&l, &feats(), &[&Hash("g", 1), &Hash("p", 2)], &weights(&[("g", 0.0), ("p", 0.0)])).unwrap();
        for (a, b) in l.hyps.iter().zip(&out.hyps) {
            prop_assert_eq!(&a.words, &b.words);
            prop_assert_eq!(a.total, b.total);
        }
    }

    #[test]
    fn combination_is_additive(seed in 0u64..1000, n in 1usize..9, lg in 0.0f64..1.0, lp in 0.0f64..1.0) {
        let l = random_list(&mut ChaCha8Rng::seed_from_u64(seed), "u", n);
        let (g, p) = (Hash("g", 1), Hash("p", 2));
        let wts = weights(&[("g", lg), ("p", lp)]);
        let both = combine_three(&l, &feats(), &g, &p, &wts).unwrap();
        let seq = rescore_nbest(&rescore_nbest(&l, &feats(), &[&p], &wts).unwrap(), &feats(), &[&g], &wts).unwrap();
        let swapped = rescore_nbest(&l, &feats(), &[&p, &g], &wts).unwrap();
        let totals = |x: &NBestList| {
            let mut t: Vec<(Vec<String>, f64)> = x.hyps.iter().map(|h| (h.words.clone(), h.total)).collect();
            t.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            t
        };
        for other in [seq, swapped] {
            for (a, b) in totals(&both).iter().zip(totals(&other)) {
                prop_assert_eq!(&a.0, &b.0);
                prop_assert!((a.1 - b.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn union_dedups_and_dominates(seed in 0u64..1000, n in 1usize..6, lambda in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refs = vec![w("a b")];
        let a = random_list(&mut rng, "u", n);
        let b = random_list(&mut rng, "u", n);
        let u = union_cross_rescore(&a, &b, &feats(), &Hash("A", 3), &Hash("B", 4), lambda).unwrap();
        let mut seen = std::collections::HashSet::new();
        for h in &u.hyps {
            prop_assert!(seen.insert(h.words.clone()));
            prop_assert!((h.total - (h.components["A"] + lambda * h.components["B"])).abs() < 1e-12);
        }
        for x in a.hyps.iter().chain(&b.hyps) {
            prop_assert!(seen.contains(&x.words));
        }
        for win in u.hyps.windows(2) {
            prop_assert!(win[0].total >= win[1].total);
        }
        let o = |l: &NBestList| oracle_wer(std::slice::from_ref(l), &refs).unwrap();
        prop_assert!(o(&u) <= o(&a).min(o(&b)));
    }

    #[test]
    fn tuned_point_is_on_the_grid(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lists: Vec<NBestList> = (0..4).map(|u| random_list(&mut rng, &u.to_string(), 4)).collect();
        let refs = vec![w("a b"), w("c"), w("d a"), w("b")];
        let f = feats();
        let fs = vec![&f; 4];
        let (g, p) = (Hash("g", 5), Hash("p", 6));
        let grid = WeightGrid::cartesian(&[0.0, 0.3, 0.9], 2);
        let t = tune_weights(&lists, &fs, &refs, &[&g, &p], &grid).unwrap();
        prop_assert!(grid.points.contains(&t.point));
        let best: Vec<Vec<String>> = lists
            .iter()
            .map(|l| rescore_nbest(l, &f, &[&g, &p], &t.weights).unwrap().hyps[0].words.clone())
            .collect();
        prop_assert_eq!(wer(&refs, &best).unwrap().rate, t.dev_wer);
        for point in &grid.points {
            let wts = weights(&[("g", point[0]), ("p", point[1])]);
            let hyps: Vec<Vec<String>> =
                lists.iter().map(|l| rescore_nbest(l, &f, &[&g, &p], &wts).unwrap().hyps[0].words.clone()).collect();
            prop_assert!(wer(&refs, &hyps).unwrap().rate >= t.dev_wer);
        }
    }
}

#[test]
fn tuning_recovers_a_constructed_optimum() {
    // the first utterance needs λ > 0.45, the second λ < 0.545
    let lists = vec![nbest("1", &[("x", 0.0), ("a", -0.9)]), nbest("2", &[("c", 0.0), ("y", -1.2)])];
    let refs = vec![w("a"), w("c")];
    let r = Table::new("p", &[("x", -2.0), ("a", 0.0), ("c", -2.2), ("y", 0.0)]);
    let f = feats();
    let grid = WeightGrid::standard(1);
    assert_eq!(grid.points.len(), 21);
    let t = tune_weights(&lists, &[&f, &f], &refs, &[&r], &grid).unwrap();
    let mut by_point = Vec::new();
    for p in &grid.points {
        let wts = weights(&[("p", p[0])]);
        let hyps: Vec<Vec<String>> = lists.iter().map(|l| rescore_nbest(l, &f, &[&r], &wts).unwrap().hyps[0].words.clone()).collect();
        by_point.push((wer(&refs, &hyps).unwrap().rate, p[0]));
    }
    let zero: Vec<f64> = by_point.iter().filter(|(e, _)| *e == 0.0).map(|(_, p)| *p).collect();
    assert_eq!(zero, [0.5]);
    assert_eq!(t.point, [0.5]);
    assert_eq!(t.weights.get("p"), Some(0.5));
    assert_eq!(t.dev_wer, 0.0);
}

#[test]
fn tuning_tie_rules() {
    let lists = vec![nbest("1", &[("x", 0.0), ("a", -0.9)])];
    let refs = vec![w("a")];
    let f = feats();
    let flat = Table::new("p", &[("x", -1.0), ("a", -1.0)]);
    let t = tune_weights(&lists, &[&f], &refs, &[&flat], &WeightGrid::standard(1)).unwrap();
    assert_eq!(t.point, [0.0]);
    assert_eq!(t.dev_wer, 1.0);
    let single = WeightGrid { points: vec![vec![0.7]] };
    assert_eq!(tune_weights(&lists, &[&f], &refs, &[&flat], &single).unwrap().point, [0.7]);
    let grid = WeightGrid { points: vec![vec![0.9, 0.0], vec![0.0, 0.9], vec![0.3, 0.3]] };
    let t = tune_weights(&lists, &[&f], &refs, &[&flat, &Table::new("q", &[("x", 0.0), ("a", 0.0)])], &grid).unwrap();
    assert_eq!(t.point, [0.0, 0.9]);
    assert!(matches!(tune_weights(&[], &[], &[], &[&flat], &single), Err(CombineError::EmptyDev)));
    let empty = WeightGrid { points: vec![] };
    assert!(matches!(tune_weights(&lists, &[&f], &refs, &[&flat], &empty), Err(CombineError::EmptyGrid)));
}

#[test]
fn union_examples() {
    let a = nbest("u", &[("a", -1.0)]);
    let b = nbest("u", &[("b", -0.5)]);
    let ra = Table::new("A", &[("a", -1.0), ("b", -3.0)]);
    let rb = Table::new("B", &[("a", -2.0), ("b", -0.5)]);
    // a: -1 + 0.5·-2 = -2; b: -3 + 0.5·-0.5 = -3.25
    let u = union_cross_rescore(&a, &b, &feats(), &ra, &rb, 0.5).unwrap();
    assert_eq!(words_of(&u), ["a", "b"]);
    assert_eq!(u.hyps[0].total, -2.0);
    assert_eq!(u.hyps[1].total, -3.25);
    let u = union_cross_rescore(&a, &b, &feats(), &ra, &rb, 2.0).unwrap();
    assert_eq!(words_of(&u), ["b", "a"]);
    assert!(matches!(
        union_cross_rescore(&a, &nbest("v", &[("b", 0.0)]), &feats(), &ra, &rb, 0.5),
        Err(CombineError::UttMismatch { .. })
    ));

    // the same system on both sides: the union is the list rescored by itself
    let l = nbest("u", &[("a", -1.0), ("b", -3.0)]);
    let u = union_cross_rescore(&l, &l, &feats(), &ra, &Table::new("A2", &[("a", -1.0), ("b", -3.0)]), 0.5).unwrap();
    let r = rescore_nbest(&l, &feats(), &[&Table::new("A2", &[("a", -1.0), ("b", -3.0)])], &weights(&[("A2", 0.5)])).unwrap();
    assert_eq!(words_of(&u), words_of(&r));
    for (x, y) in u.hyps.iter().zip(&r.hyps) {
        assert_eq!(x.total, y.total);
    }
}

#[test]
fn weights_file_round_trip() {
    let wts = weights(&[("phoneme", 0.35), ("grapheme", 0.05)]);
    assert_eq!(wts.to_text(), "grapheme=0.05\nphoneme=0.35\n");
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.txt");
    wts.save(&p).unwrap();
    assert_eq!(CombinationWeights::load(&p).unwrap(), wts);
    assert!(CombinationWeights::parse("a=-1\n").is_err());
    assert!(CombinationWeights::parse("a=1\na=2\n").is_err());
    assert!(matches!(CombinationWeights::parse("x\n"), Err(CombineError::Parse { line: 1, .. })));
    assert!(CombinationWeights::parse("a=inf\n").is_err());
}

#[test]
fn las_rescorer_scores_converted_words() {
    let lex = parse_lexicon("CAT K AE T\nAT AE T\n").unwrap();
    let codec = UnitCodec::Phoneme(PhonemeCodec::new(lex.clone(), fix_pronunciations(&lex, 0)));
    let cfg = LasConfig { input_dim: 2, ..LasConfig::desk(2, codec.inventory().len()) };
    let m = LasModel::new(cfg, codec, 1).unwrap();
    let f = FeatureSequence::new(6, 2, (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
    let r = LasRescorer::new("phoneme", &m);
    let hyp = w("CAT AT");
    let direct = m.score_sequence(&f, &m.codec().encode(&hyp)).unwrap();
    assert_eq!(r.score(&f, &hyp).unwrap(), direct);
    let batch = r.score_all(&f, &[&hyp, &w("DOG"), &[], &w("CAT DOG"), &w("DOG DOG")]);
    assert_eq!(*batch[0].as_ref().unwrap(), direct);
    assert!(matches!(batch[1], Err(CombineError::Conversion { .. })));
    assert_eq!(*batch[2].as_ref().unwrap(), m.score_sequence(&f, &[]).unwrap());
    // a partly known hypothesis is scored through <unk>
    let mixed = m.score_sequence(&f, &m.codec().encode(&w("CAT DOG"))).unwrap();
    assert_eq!(*batch[3].as_ref().unwrap(), mixed);
    assert!(matches!(batch[4], Err(CombineError::Conversion { .. })));
    let l = nbest("u", &[("DOG", 0.0), ("CAT", -1.0)]);
    let out = rescore_nbest(&l, &f, &[&r], &weights(&[("phoneme", 0.1)])).unwrap();
    assert_eq!(words_of(&out), ["CAT", "DOG"]);
}
