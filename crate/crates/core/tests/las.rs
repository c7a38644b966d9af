use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitlab::corpus::{Corpus, FeatureSequence, Split, Utterance};
use unitlab::neural::*;
use unitlab::units::{UnitCodec, UnitId, UnitInventory, UnitKind, EOS};

/// Grapheme codec with `letters` after the four reserved symbols.
fn codec(letters: &str) -> UnitCodec {
    let inv = UnitInventory::with_reserved(UnitKind::Grapheme, letters.chars().map(String::from)).unwrap();
    UnitCodec::Grapheme(inv)
}

fn tiny_config(dim: usize, vocab: usize) -> LasConfig {
    LasConfig {
        input_dim: dim,
        subsample: 4,
        encoder_layers: 1,
        encoder_hidden: 6,
        encoder_proj: 5,
        decoder_layers: 1,
        decoder_hidden: 6,
        attention_dim: 4,
        embedding_dim: 3,
        vocab_size: vocab,
    }
}

fn random_features(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> FeatureSequence {
    FeatureSequence::new(frames, dim, (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn zero_all(model: &mut LasModel) {
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        model.params_mut().get_mut(id).data_mut().fill(0.0);
    }
}

fn randomize_output(model: &mut LasModel, rng: &mut ChaCha8Rng, eos_bias: f64) {
    let w = model.params().find("dec.out.w").unwrap();
    let b = model.params().find("dec.out.b").unwrap();
    for x in model.params_mut().get_mut(w).data_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
    model.params_mut().get_mut(b).data_mut()[EOS as usize] = eos_bias;
}

/// Spelled words rendered as three noisy frames per letter.
fn spelled_corpus(words: &[&str], dim: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..26).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let utts = words
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let mut data = Vec::new();
            let mut frames = 0;
            for ch in line.chars().filter(|c| c.is_ascii_uppercase()) {
                for _ in 0..3 {
                    let m = &means[(ch as u8 - b'A') as usize];
                    data.extend(m.iter().map(|x| x + rng.random_range(-0.1..0.1)));
                    frames += 1;
                }
            }
            Utterance {
                id: format!("u{i:02}"),
                features: FeatureSequence::new(frames, dim, data).unwrap(),
                transcript: line.split(' ').map(String::from).collect(),
            }
        })
        .collect();
    Corpus::new(Split::Train, utts).unwrap()
}

#[test]
fn encoder_length_is_the_frame_count_divided_by_four_rounded_up() {
    let model = LasModel::new(tiny_config(3, 6), codec("AB"), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    assert_eq!(model.encode(&random_features(&mut rng, 7, 3)).unwrap().steps(), 2);
    for _ in 0..50 {
        let t = rng.random_range(1..40);
        let enc = model.encode(&random_features(&mut rng, t, 3)).unwrap();
        assert_eq!(enc.steps(), t.div_ceil(4));
        assert_eq!(enc.states().shape(), (t.div_ceil(4), 5));
    }
}

#[test]
fn zero_parameters_give_zero_states_and_uniform_scores() {
    let mut model = LasModel::new(tiny_config(3, 7), codec("ABC"), 2).unwrap();
    zero_all(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = random_features(&mut rng, 13, 3);
    let enc = model.encode(&f).unwrap();
    assert!(enc.states().data().iter().all(|&x| x == 0.0));
    for len in 0..6 {
        let units: Vec<UnitId> = (0..len).map(|_| rng.random_range(0..7)).collect();
        let s = model.score_sequence(&f, &units).unwrap();
        let expected = (len as f64 + 1.0) * -(7f64).ln();
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
    }
}

#[test]
fn fresh_model_loss_is_log_vocab() {
    let corpus = spelled_corpus(&["AB", "BA CA"], 4, 1);
    let model = LasModel::new(tiny_config(4, 7), codec("ABC"), 4).unwrap();
    let loss = model.corpus_loss(&corpus).unwrap();
    assert!((loss - (7f64).ln()).abs() < 1e-12);
}

#[test]
fn single_state_attention_puts_all_weight_on_it() {
    let model = LasModel::new(tiny_config(3, 6), codec("AB"), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let enc = model.encode(&random_features(&mut rng, 3, 3)).unwrap();
    let (alpha, ctx) = model.attend(&enc, &[0.3, -0.2, 0.1, 0.5, 0.0, 1.0]);
    assert_eq!(alpha, vec![1.0]);
    assert_eq!(ctx, enc.states().row(0).to_vec());
}

#[test]
fn zero_attention_vector_gives_uniform_weights() {
    let mut model = LasModel::new(tiny_config(3, 6), codec("AB"), 6).unwrap();
    let v = model.params().find("dec.att.v").unwrap();
    model.params_mut().get_mut(v).data_mut().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let enc = model.encode(&random_features(&mut rng, 21, 3)).unwrap();
    let (alpha, _) = model.attend(&enc, &[0.3, -0.2, 0.1, 0.5, 0.0, 1.0]);
    assert_eq!(alpha.len(), 6);
    for a in alpha {
        assert!((a - 1.0 / 6.0).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_weights_are_a_distribution(frames in 1usize..60, seed in 0u64..1000) {
        let model = LasModel::new(tiny_config(3, 6), codec("AB"), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = model.encode(&random_features(&mut rng, frames, 3)).unwrap();
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (alpha, ctx) = model.attend(&enc, &q);
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // context is the alpha-weighted combination of states
        for (k, &c) in ctx.iter().enumerate() {
            let mix: f64 = (0..enc.steps()).map(|t| alpha[t] * enc.states().get(t, k)).sum();
            prop_assert!((mix - c).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_scores_are_log_probabilities(seed in 0u64..1000, len in 0usize..8) {
        let mut model = LasModel::new(tiny_config(3, 6), codec("AB"), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        randomize_output(&mut model, &mut rng, 0.0);
        let f = random_features(&mut rng, 10, 3);
        let units: Vec<UnitId> = (0..len).map(|_| rng.random_range(0..6)).collect();
        let s = model.score_sequence(&f, &units).unwrap();
        prop_assert!(s <= 0.0);
        prop_assert_eq!(s, model.score_sequence(&f, &units).unwrap());
    }
}

/// All non-EOS sequences of exactly `len` units over `v` symbols.
fn prefixes(v: u32, len: usize) -> Vec<Vec<UnitId>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| (0..v).filter(|&u| u != EOS).map(move |u| [p.clone(), vec![u]].concat()))
            .collect();
    }
    out
}

/// log P(prefix) under the step API, without the closing EOS.
fn prefix_logprob(model: &LasModel, enc: &Encoded, prefix: &[UnitId]) -> f64 {
    let mut state = model.initial_state();
    let mut prev = unitlab::units::SOS;
    let mut lp = 0.0;
    for &u in prefix {
        let (mut next, logp) = model.step(enc, &[&state], &[prev]);
        lp += logp.get(0, u as usize);
        state = next.remove(0);
        prev = u;
    }
    lp
}

#[test]
fn terminated_sequences_and_open_prefixes_partition_the_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = LasModel::new(tiny_config(3, 5), codec("A"), 11).unwrap();
    randomize_output(&mut model, &mut rng, 1.5);
    let f = random_features(&mut rng, 9, 3);
    let enc = model.encode(&f).unwrap();
    let mut mass = 0.0;
    let mut last = 0.0;
    for max_len in 0..6 {
        let seqs = prefixes(5, max_len);
        let scores = model.score_encoded(&enc, &seqs).unwrap();
        mass += scores.iter().map(|s| s.exp()).sum::<f64>();
        assert!(mass <= 1.0 + 1e-12 && mass > last);
        let open: f64 = prefixes(5, max_len + 1).iter().map(|p| prefix_logprob(&model, &enc, p).exp()).sum();
        assert!((mass + open - 1.0).abs() < 1e-9, "{mass} + {open}");
        last = mass;
    }
    assert!(mass > 0.9);
}

#[test]
fn batched_scoring_matches_single_scoring_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut model = LasModel::new(tiny_config(3, 6), codec("AB"), 12).unwrap();
    randomize_output(&mut model, &mut rng, 0.0);
    let f = random_features(&mut rng, 17, 3);
    let seqs: Vec<Vec<UnitId>> = (0..6).map(|l| (0..l).map(|_| rng.random_range(0..6)).collect()).collect();
    let batched = model.score_sequences(&f, &seqs).unwrap();
    for (s, b) in seqs.iter().zip(batched) {
        assert_eq!(model.score_sequence(&f, s).unwrap().to_bits(), b.to_bits());
    }
}

#[test]
fn step_api_matches_teacher_forcing() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut model = LasModel::new(tiny_config(3, 6), codec("AB"), 13).unwrap();
    randomize_output(&mut model, &mut rng, 0.0);
    let f = random_features(&mut rng, 17, 3);
    let enc = model.encode(&f).unwrap();
    let seq = vec![3, 4, 5, 4];
    let (mut state, mut prev, mut lp) = (model.initial_state(), unitlab::units::SOS, 0.0);
    for &u in seq.iter().chain([EOS].iter()) {
        let (mut next, logp) = model.step(&enc, &[&state], &[prev]);
        let total: f64 = logp.row(0).iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        lp += logp.get(0, u as usize);
        state = next.remove(0);
        prev = u;
    }
    assert!((lp - model.score_sequence(&f, &seq).unwrap()).abs() < 1e-12);
}

#[test]
fn invalid_inputs_are_rejected() {
    let model = LasModel::new(tiny_config(3, 6), codec("AB"), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let wrong = random_features(&mut rng, 8, 4);
    assert!(matches!(model.encode(&wrong), Err(NeuralError::Dim { expected: 3, got: 4 })));
    let f = random_features(&mut rng, 8, 3);
    assert!(matches!(model.score_sequence(&f, &[3, 6]), Err(NeuralError::BadUnit(6))));
    let mut cfg = tiny_config(3, 6);
    cfg.decoder_hidden = 0;
    assert!(matches!(LasModel::new(cfg, codec("AB"), 1), Err(NeuralError::Config(_))));
    assert!(matches!(LasModel::new(tiny_config(3, 9), codec("AB"), 1), Err(NeuralError::Config(_))));
}

const OVERFIT: [&str; 10] = ["CAB", "BAD", "DAB CAB", "ACE", "BEAD", "FADE", "CAFE BAD", "DECAF", "BED", "FACE"];

fn trained(seed: u64, epochs: usize) -> (LasModel, Corpus, TrainReport) {
    let corpus = spelled_corpus(&OVERFIT, 6, 7);
    let codec = UnitCodec::Grapheme(unitlab::units::build_grapheme_inventory(&corpus).unwrap());
    let v = codec.inventory().len();
    let mut cfg = LasConfig::desk(6, v);
    cfg.encoder_layers = 1;
    cfg.encoder_hidden = 32;
    cfg.encoder_proj = 32;
    cfg.decoder_hidden = 32;
    cfg.attention_dim = 32;
    cfg.embedding_dim = 16;
    let mut model = LasModel::new(cfg, codec, seed).unwrap();
    let tc = TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 1e-2,
        seed,
        ..TrainConfig::default()
    };
    let report = train_las(&mut model, &corpus, Some(&corpus), &tc).unwrap();
    (model, corpus, report)
}

#[test]
fn tiny_corpus_is_memorised() {
    let (model, corpus, report) = trained(1, 150);
    let acc = model.token_accuracy(&corpus).unwrap();
    assert!(acc >= 0.99, "accuracy {acc}, losses {:?}", report.train_loss);
    assert!(report.dev_loss.last().unwrap() < &report.dev_loss[0]);
}

#[test]
fn training_is_deterministic_and_checkpoints_reload_exactly() {
    let (a, corpus, ra) = trained(3, 4);
    let (b, _, rb) = trained(3, 4);
    assert_eq!(a.params().fingerprint(), b.params().fingerprint());
    assert_eq!(ra, rb);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("las.ckpt");
    a.save(&path).unwrap();
    let back = LasModel::load(&path).unwrap();
    assert_eq!(back.params().fingerprint(), a.params().fingerprint());
    for u in corpus.utterances() {
        let units = a.codec().encode(&u.transcript);
        let x = a.score_sequence(&u.features, &units).unwrap();
        let y = back.score_sequence(&u.features, &units).unwrap();
        assert_eq!(x.to_bits(), y.to_bits());
    }
    let (c, _, _) = trained(4, 4);
    assert_ne!(a.params().fingerprint(), c.params().fingerprint());
}

#[test]
fn empty_corpus_is_an_error() {
    let mut model = LasModel::new(tiny_config(3, 6), codec("AB"), 1).unwrap();
    let empty = Corpus::new(Split::Train, vec![]).unwrap();
    assert!(matches!(
        train_las(&mut model, &empty, None, &TrainConfig::default()),
        Err(NeuralError::EmptyCorpus)
    ));
}

#[test]
fn gradients_match_finite_differences_on_a_tiny_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cfg = tiny_config(8, 8);
    cfg.encoder_layers = 2;
    let mut model = LasModel::new(cfg, codec("ABCD"), 21).unwrap();
    // wide weights push the gates out of their near-linear range
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        for x in model.params_mut().get_mut(id).data_mut() {
            *x = rng.random_range(-0.8..0.8);
        }
    }
    let f = random_features(&mut rng, 12, 8);
    let err = grad_check(&model, &f, &[3, 4, 5, 3, 7], 400, 21).unwrap();
    assert!(err < 1e-4, "max relative error {err}");

    let zero = FeatureSequence::new(12, 8, vec![0.0; 96]).unwrap();
    let err = grad_check(&model, &zero, &[3, 6], 400, 22).unwrap();
    assert!(err.is_finite() && err < 1e-4, "{err}");
}

#[test]
fn linear_softmax_gradients_are_nearly_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut store = ParamStore::new();
    let w = store.add("w", Matrix::from_vec(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()));
    let b = store.add("b", Matrix::from_vec(1, 4, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()));
    let x = Matrix::from_vec(6, 5, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect());
    let targets = vec![0, 3, 2, 1, 1, 0];
    let err = finite_difference_check(
        &store,
        |tape, store| {
            let x = tape.constant(x.clone());
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            let y = tape.matmul(&x, &w);
            let y = tape.add_row(&y, &b);
            tape.cross_entropy(&y, &targets, &[1.0; 6])
        },
        24,
        1,
    );
    assert!(err < 1e-7, "{err}");
}

#[test]
fn finite_differences_catch_a_hidden_dependence() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut store = ParamStore::new();
    let w = store.add("w", Matrix::from_vec(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()));
    let x = Matrix::from_vec(6, 5, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect());
    let targets = vec![0, 3, 2, 1, 1, 0];
    // the second read of w is a constant, so the tape gradient is half the truth
    let err = finite_difference_check(
        &store,
        |tape, store| {
            let x = tape.constant(x.clone());
            let seen = tape.param(store, w);
            let hidden = tape.constant(store.get(w).clone());
            let a = tape.matmul(&x, &seen);
            let b = tape.matmul(&x, &hidden);
            let y = tape.add(&a, &b);
            tape.cross_entropy(&y, &targets, &[1.0; 6])
        },
        20,
        1,
    );
    assert!(err > 0.1, "{err}");
}
