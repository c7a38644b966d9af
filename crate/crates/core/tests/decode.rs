use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitlab::corpus::{parse_lexicon, FeatureSequence, Lexicon};
use unitlab::decode::*;
use unitlab::lmfst::*;
use unitlab::neural::*;
use unitlab::units::*;

fn grapheme_codec(letters: &str) -> UnitCodec {
    UnitCodec::Grapheme(UnitInventory::with_reserved(UnitKind::Grapheme, letters.chars().map(String::from)).unwrap())
}

fn tiny(dim: usize, codec: UnitCodec, seed: u64) -> LasModel {
    let cfg = LasConfig {
        input_dim: dim,
        subsample: 4,
        encoder_layers: 1,
        encoder_hidden: 6,
        encoder_proj: 5,
        decoder_layers: 1,
        decoder_hidden: 6,
        attention_dim: 4,
        embedding_dim: 3,
        vocab_size: codec.inventory().len(),
    };
    LasModel::new(cfg, codec, seed).unwrap()
}

/// Random weights everywhere so the output distributions are peaked.
fn scramble(model: &mut LasModel, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        for x in model.params_mut().get_mut(id).data_mut() {
            *x = rng.random_range(-scale..scale);
        }
    }
}

fn features(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> FeatureSequence {
    FeatureSequence::new(frames, dim, (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn greedy(model: &LasModel, f: &FeatureSequence, max_len: usize) -> Vec<UnitId> {
    let enc = model.encode(f).unwrap();
    let (mut state, mut prev, mut out) = (model.initial_state(), SOS, Vec::new());
    for t in 0..=max_len {
        let (mut next, logp) = model.step(&enc, &[&state], &[prev]);
        let row = logp.row(0);
        let best = if t == max_len {
            EOS
        } else {
            (1..row.len()).fold(1, |b, k| if row[k] > row[b] { k } else { b }) as UnitId
        };
        if best == EOS {
            break;
        }
        out.push(best);
        state = next.remove(0);
        prev = best;
    }
    out
}

#[test]
fn beam_of_one_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..10 {
        let mut m = tiny(3, grapheme_codec("AB"), seed);
        scramble(&mut m, &mut rng, 1.0);
        let f = features(&mut rng, 9, 3);
        let cfg = BeamConfig { beam: 1, ..BeamConfig::default() };
        let out = beam_search(&m, &f, &cfg).unwrap();
        assert_eq!(out.hyps.len(), 1);
        assert_eq!(out.hyps[0].units, greedy(&m, &f, cfg.max_len(3)));
    }
}

#[test]
fn full_beam_finds_the_exhaustive_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..20 {
        let letters = ["", "A", "AB"][seed as usize % 3];
        let mut m = tiny(3, grapheme_codec(letters), seed);
        scramble(&mut m, &mut rng, 1.5);
        let f = features(&mut rng, 11, 3);
        let (best, score, _) = exhaustive_search(&m, &f, 4).unwrap();
        let cfg = BeamConfig { beam: 341, max_len: Some(4), ..BeamConfig::default() };
        let top = beam_search(&m, &f, &cfg).unwrap();
        assert_eq!(top.hyps[0].units, best, "seed {seed}");
        assert!((top.hyps[0].total - score).abs() < 1e-12);
    }
}

#[test]
fn exhaustive_search_counts_every_length_including_empty() {
    let mut m = tiny(3, grapheme_codec(""), 3);
    let ids: Vec<ParamId> = m.params().ids().collect();
    for id in ids {
        m.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let f = features(&mut ChaCha8Rng::seed_from_u64(3), 5, 3);
    let (best, score, evaluated) = exhaustive_search(&m, &f, 2).unwrap();
    assert_eq!(evaluated, 7);
    assert_eq!(best, Vec::<UnitId>::new());
    assert_eq!(score, -(4f64).ln());
    assert!(matches!(exhaustive_search(&m, &f, 30), Err(DecodeError::Budget(_))));
}

#[test]
fn zero_model_ties_resolve_lexicographically() {
    let mut m = tiny(3, grapheme_codec("AB"), 4);
    let ids: Vec<ParamId> = m.params().ids().collect();
    for id in ids {
        m.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let f = features(&mut ChaCha8Rng::seed_from_u64(4), 8, 3);
    let cfg = BeamConfig { beam: 3, ..BeamConfig::default() };
    let out = beam_search(&m, &f, &cfg).unwrap();
    let units: Vec<Vec<UnitId>> = out.hyps.iter().map(|h| h.units.clone()).collect();
    assert_eq!(units, vec![vec![], vec![2], vec![2, 2]]);
    assert_eq!(out, beam_search(&m, &f, &cfg).unwrap());
}

#[test]
fn eos_margin_rule() {
    assert!(!eos_allowed(-2.1, -1.0, 1.0));
    assert!(eos_allowed(-1.9, -1.0, 1.0));
    assert!(eos_allowed(-1e9, -1.0, f64::INFINITY));
}

fn small_lm(codec: UnitCodec, rng: &mut ChaCha8Rng) -> LstmLm {
    let v = codec.inventory().len();
    let mut lm = LstmLm::new(LstmLmConfig { embedding_dim: 3, layers: 1, hidden: 5, vocab_size: v }, codec, 9).unwrap();
    let ids: Vec<ParamId> = lm.params().ids().collect();
    for id in ids {
        for x in lm.params_mut().get_mut(id).data_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
    }
    lm
}

#[test]
fn fusion_without_lm_weight_reduces_to_plain_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..8 {
        let mut m = tiny(3, grapheme_codec("AB"), seed);
        scramble(&mut m, &mut rng, 1.0);
        let lm = small_lm(grapheme_codec("AB"), &mut rng);
        let f = features(&mut rng, 13, 3);
        let plain = beam_search(&m, &f, &BeamConfig::default()).unwrap();
        let cfg = BeamConfig { lm_weight: 0.0, eos_margin: f64::INFINITY, ..BeamConfig::default() };
        let fused = beam_search_fused(&m, &lm, &f, &cfg).unwrap();
        assert_eq!(write_nbest(&[plain]), write_nbest(&[fused]));
    }
}

#[test]
fn fused_scores_are_kept_per_component() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut m = tiny(3, grapheme_codec("AB"), 6);
    scramble(&mut m, &mut rng, 1.0);
    let lm = small_lm(grapheme_codec("AB"), &mut rng);
    let f = features(&mut rng, 13, 3);
    let cfg = BeamConfig { lm_weight: 0.35, eos_margin: 1.0, ..BeamConfig::default() };
    let out = beam_search_fused(&m, &lm, &f, &cfg).unwrap();
    assert!(!out.is_empty());
    for h in &out.hyps {
        let las = m.score_sequence(&f, &h.units).unwrap();
        let l = lm.lm_score(&h.units).unwrap();
        assert!((h.components["las"] - las).abs() < 1e-9);
        assert!((h.components["lm"] - l).abs() < 1e-9);
        assert!((h.total - (las + 0.35 * l)).abs() < 1e-9);
    }
    for w in out.hyps.windows(2) {
        assert!(w[0].total >= w[1].total);
    }
    let other = small_lm(grapheme_codec("ABC"), &mut rng);
    assert!(matches!(beam_search_fused(&m, &other, &f, &cfg), Err(DecodeError::InventoryMismatch(_))));
}

#[test]
fn plain_search_scores_match_teacher_forcing() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut m = tiny(3, grapheme_codec("AB"), 7);
    scramble(&mut m, &mut rng, 1.0);
    let f = features(&mut rng, 13, 3);
    let out = beam_search(&m, &f, &BeamConfig::default()).unwrap();
    let mut seen = std::collections::HashSet::new();
    for h in &out.hyps {
        assert!(seen.insert(h.units.clone()));
        assert!((h.total - m.score_sequence(&f, &h.units).unwrap()).abs() < 1e-9);
        assert_eq!(h.total, h.components["las"]);
    }
}

const LEXICON: &str = "PAIR P EH R\nPEAR P EH R\nCAT K AE T\nREAD R IY D\nREAD R EH D\nRED R EH D\n";

fn phoneme_model(lex: &Lexicon, seed: u64, rng: &mut ChaCha8Rng) -> LasModel {
    let codec = UnitCodec::Phoneme(PhonemeCodec::new(lex.clone(), fix_pronunciations(lex, 0)));
    let mut m = tiny(3, codec, seed);
    scramble(&mut m, rng, 1.0);
    m
}

fn sentences(words: &[String], max_len: usize) -> Vec<Vec<String>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<String>| words.iter().map(move |w| [s.clone(), vec![w.clone()]].concat()))
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn readings(lex: &Lexicon, inv: &UnitInventory, words: &[String]) -> Vec<Vec<UnitId>> {
    let mut out = vec![vec![]];
    for w in words {
        let mut next = Vec::new();
        for p in &out {
            for pron in lex.pronunciations(w).unwrap() {
                let mut q = p.clone();
                q.extend(pron.iter().map(|s| inv.id(s).unwrap()));
                q.push(BOUNDARY);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

fn text(lines: &[&str]) -> Vec<Vec<String>> {
    lines.iter().map(|l| l.split(' ').map(String::from).collect()).collect()
}

#[test]
fn transducer_search_matches_enumerated_combined_scores() {
    let lex = parse_lexicon(LEXICON).unwrap();
    let lm = train_ngram(&text(&["PAIR", "PAIR CAT", "PAIR", "PEAR", "RED CAT", "READ"]), &NGramConfig::default()).unwrap();
    let net = compose(&build_lexicon_fst(&lex).unwrap(), &build_grammar_fst(&lm)).unwrap();
    let words: Vec<String> = lex.words().map(String::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (seed, lambda) in [(1, 1.0), (2, 0.5), (3, 2.0), (4, 1.0)] {
        let m = phoneme_model(&lex, seed, &mut rng);
        let f = features(&mut rng, 14, 3);
        let inv = m.codec().inventory().clone();
        let cfg = BeamConfig { beam: 400, max_len: Some(8), lm_weight: lambda, ..BeamConfig::default() };
        let out = wfst_beam_search(&m, &net, &f, &cfg).unwrap();
        // oracle: every word sequence, every reading, up to 8 units
        let mut best: BTreeMap<Vec<String>, f64> = BTreeMap::new();
        for s in sentences(&words, 2) {
            for r in readings(&lex, &inv, &s) {
                if r.len() > 8 {
                    continue;
                }
                let total = m.score_sequence(&f, &r).unwrap() + lambda * lm_logprob(&lm, &s);
                let e = best.entry(s.clone()).or_insert(f64::NEG_INFINITY);
                *e = e.max(total);
            }
        }
        let (top_words, top) = best
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .unwrap();
        assert_eq!(&out.hyps[0].words, top_words, "seed {seed}");
        assert!((out.hyps[0].total - top).abs() < 1e-9);
        for h in &out.hyps {
            assert!((h.total - best[&h.words]).abs() < 1e-9, "{:?}", h.words);
        }
    }
}

#[test]
fn language_model_resolves_homophones() {
    let lex = parse_lexicon(LEXICON).unwrap();
    let lm = train_ngram(&text(&["PAIR", "PAIR", "PAIR", "PEAR", "CAT", "RED", "READ"]), &NGramConfig::default()).unwrap();
    let net = compose(&build_lexicon_fst(&lex).unwrap(), &build_grammar_fst(&lm)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = phoneme_model(&lex, 5, &mut rng);
    let f = features(&mut rng, 14, 3);
    let inv = m.codec().inventory().clone();
    let pair = readings(&lex, &inv, &text(&["PAIR"])[0]).remove(0);
    let cfg = BeamConfig { beam: 50, max_len: Some(4), lm_weight: 1.0, ..BeamConfig::default() };
    let out = wfst_beam_search(&m, &net, &f, &cfg).unwrap();
    let pos = |w: &str| out.hyps.iter().position(|h| h.words == [w]).unwrap();
    assert!(pos("PAIR") < pos("PEAR"));
    let expected = m.score_sequence(&f, &pair).unwrap() + lm_logprob(&lm, &text(&["PAIR"])[0]);
    assert!((out.hyps[pos("PAIR")].total - expected).abs() < 1e-9);

    // without the LM the homophones tie and fall back to word order
    let cfg = BeamConfig { lm_weight: 0.0, ..cfg };
    let out = wfst_beam_search(&m, &net, &f, &cfg).unwrap();
    let (a, b) = (pos_of(&out, "PAIR"), pos_of(&out, "PEAR"));
    assert_eq!(b, a + 1);
    assert_eq!(out.hyps[a].total, out.hyps[b].total);
}

fn pos_of(out: &NBestList, w: &str) -> usize {
    out.hyps.iter().position(|h| h.words == [w]).unwrap()
}

#[test]
fn transducer_hypotheses_are_accepted_by_the_network() {
    let lex = parse_lexicon(LEXICON).unwrap();
    let lm = train_ngram(&text(&["PAIR CAT", "RED CAT", "READ PEAR", "CAT"]), &NGramConfig::default()).unwrap();
    // CAT is dropped from the lexicon: it must never be hypothesised
    let small = lex.restrict(|w| w != "CAT");
    let lm_words = lm.words().map(|(_, w)| w.to_string()).collect::<Vec<_>>();
    assert!(lm_words.contains(&"CAT".to_string()));
    let net = compose(&build_lexicon_fst(&small).unwrap(), &build_grammar_fst(&lm)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for seed in 0..5 {
        let m = phoneme_model(&lex, seed, &mut rng);
        let f = features(&mut rng, 20, 3);
        let cfg = BeamConfig { beam: 8, lm_weight: 0.7, ..BeamConfig::default() };
        let out = wfst_beam_search(&m, &net, &f, &cfg).unwrap();
        let mut seen = std::collections::HashSet::new();
        for h in &out.hyps {
            assert!(!h.words.contains(&"CAT".to_string()));
            assert!(seen.insert(h.words.clone()));
            let inv = m.codec().inventory();
            let input: Vec<Label> = h.units.iter().map(|&u| net.isyms().label(inv.symbol(u).unwrap()).unwrap()).collect();
            let output: Vec<Label> = h.words.iter().map(|w| net.osyms().label(w).unwrap()).collect();
            let w = best_path_weight_with_output(&net, &input, &output).expect("accepted");
            assert!(-h.components["lm"] >= w - 1e-9);
            assert!((h.total - (h.components["las"] + 0.7 * h.components["lm"])).abs() < 1e-9);
            assert!((h.components["las"] - m.score_sequence(&f, &h.units).unwrap()).abs() < 1e-9);
        }
    }
}

#[test]
fn search_rejects_the_wrong_unit_kind() {
    let lex = parse_lexicon(LEXICON).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ph = phoneme_model(&lex, 1, &mut rng);
    let f = features(&mut rng, 8, 3);
    assert!(matches!(beam_search(&ph, &f, &BeamConfig::default()), Err(DecodeError::NotWordRecoverable(_))));
    let lm = train_ngram(&text(&["PAIR"]), &NGramConfig::default()).unwrap();
    let net = compose(&build_lexicon_fst(&lex.restrict(|w| w == "PAIR")).unwrap(), &build_grammar_fst(&lm)).unwrap();
    let g = tiny(3, grapheme_codec("AB"), 1);
    assert!(matches!(wfst_beam_search(&g, &net, &f, &BeamConfig::default()), Err(DecodeError::InventoryMismatch(_))));
}
