use std::collections::BTreeMap;

use log::warn;

use super::{rank, BeamConfig, DecodeError, Hypothesis, NBestList};
use crate::corpus::FeatureSequence;
use crate::neural::{DecoderState, LasModel, LmState, LstmLm};
use crate::units::{UnitId, EOS, SOS};

/// Largest number of sequences [`exhaustive_search`] will score.
pub const EXHAUSTIVE_BUDGET: u64 = 1_000_000;

/// EOS may be expanded when its total is within `margin` of the step's
/// best candidate.
pub fn eos_allowed(eos_total: f64, best_total: f64, margin: f64) -> bool {
    eos_total >= best_total - margin
}

struct Entry {
    units: Vec<UnitId>,
    las: f64,
    lm: f64,
    state: DecoderState,
    lm_state: Option<LmState>,
}

struct Candidate {
    from: usize,
    unit: UnitId,
    las: f64,
    lm: f64,
    total: f64,
    /// Units with the new one appended (EOS included).
    key: Vec<UnitId>,
}

fn check_decodable(model: &LasModel, features: &FeatureSequence) -> Result<(), DecodeError> {
    let kind = model.codec().kind();
    if !kind.word_recoverable() {
        return Err(DecodeError::NotWordRecoverable(kind.name()));
    }
    if features.num_frames() == 0 {
        return Err(DecodeError::EmptyFeatures);
    }
    Ok(())
}

/// Label-synchronous beam search on raw summed log-probabilities.
/// Candidates from all beam entries are pooled; the best `beam` of them
/// survive, and those ending in EOS retire to the done list.
pub fn beam_search(model: &LasModel, features: &FeatureSequence, cfg: &BeamConfig) -> Result<NBestList, DecodeError> {
    check_decodable(model, features)?;
    search(model, None, features, cfg, f64::INFINITY)
}

/// Shallow fusion: each step adds `lm_weight` times the LSTM LM
/// log-probability, and EOS is subject to the margin rule. With
/// `lm_weight == 0` the LM is not consulted at all.
pub fn beam_search_fused(
    model: &LasModel,
    lm: &LstmLm,
    features: &FeatureSequence,
    cfg: &BeamConfig,
) -> Result<NBestList, DecodeError> {
    check_decodable(model, features)?;
    if lm.codec().inventory() != model.codec().inventory() {
        return Err(DecodeError::InventoryMismatch(
            "the LM and the acoustic model use different unit inventories".into(),
        ));
    }
    let lm = (cfg.lm_weight > 0.0).then_some(lm);
    search(model, lm, features, cfg, cfg.eos_margin)
}

fn search(
    model: &LasModel,
    lm: Option<&LstmLm>,
    features: &FeatureSequence,
    cfg: &BeamConfig,
    margin: f64,
) -> Result<NBestList, DecodeError> {
    let enc = model.encode(features)?;
    let max_len = cfg.max_len(enc.steps());
    let beam = cfg.beam.max(1);
    let lambda = cfg.lm_weight;
    let v = model.vocab_size();
    let mut live = vec![Entry {
        units: Vec::new(),
        las: 0.0,
        lm: 0.0,
        state: model.initial_state(),
        lm_state: lm.map(LstmLm::initial_state),
    }];
    let mut done: Vec<Candidate> = Vec::new();
    let mut finished: Vec<Vec<UnitId>> = Vec::new();
    for t in 0..=max_len {
        let prev: Vec<UnitId> = live.iter().map(|e| e.units.last().copied().unwrap_or(SOS)).collect();
        let (states, logp) = model.step(&enc, &live.iter().map(|e| &e.state).collect::<Vec<_>>(), &prev);
        let lm_out = lm.map(|lm| {
            let s: Vec<&LmState> = live.iter().map(|e| e.lm_state.as_ref().expect("fused")).collect();
            lm.step(&s, &prev)
        });
        let mut cands = Vec::with_capacity(live.len() * v);
        for (i, e) in live.iter().enumerate() {
            let units: Box<dyn Iterator<Item = UnitId>> = if t == max_len {
                Box::new(std::iter::once(EOS))
            } else {
                Box::new((0..v as UnitId).filter(|&u| u != SOS))
            };
            for u in units {
                let las = e.las + logp.get(i, u as usize);
                let (lm_score, total) = match &lm_out {
                    Some((_, lp)) => {
                        let l = e.lm + lp.get(i, u as usize);
                        (l, las + lambda * l)
                    }
                    None => (0.0, las),
                };
                let mut key = e.units.clone();
                key.push(u);
                cands.push(Candidate {
                    from: i,
                    unit: u,
                    las,
                    lm: lm_score,
                    total,
                    key,
                });
            }
        }
        let best = cands.iter().map(|c| c.total).fold(f64::NEG_INFINITY, f64::max);
        cands.retain(|c| c.unit != EOS || eos_allowed(c.total, best, margin));
        cands.sort_by(|a, b| rank(a.total, &a.key, b.total, &b.key));
        cands.truncate(beam);
        let mut states: Vec<Option<DecoderState>> = states.into_iter().map(Some).collect();
        let mut lm_states: Vec<Option<LmState>> = match lm_out {
            Some((s, _)) => s.into_iter().map(Some).collect(),
            None => Vec::new(),
        };
        let mut next = Vec::with_capacity(beam);
        for c in cands {
            if c.unit == EOS {
                finished.push(c.key.clone());
                done.push(c);
                continue;
            }
            let state = states[c.from].clone().expect("state");
            let lm_state = lm_states.get_mut(c.from).and_then(|s| s.clone());
            next.push(Entry {
                units: c.key,
                las: c.las,
                lm: c.lm,
                state,
                lm_state,
            });
        }
        states.clear();
        live = next;
        done.sort_by(|a, b| rank(a.total, &a.key, b.total, &b.key));
        done.truncate(beam);
        if live.is_empty() {
            break;
        }
        // totals never increase, so a full done list can only be beaten by
        // a live entry that is already at least as good as its worst member
        if done.len() == beam {
            let worst = done[beam - 1].total;
            let lm_bound = |e: &Entry| if lm.is_some() { e.las + lambda * e.lm } else { e.las };
            if live.iter().all(|e| lm_bound(e) < worst) {
                break;
            }
        }
    }
    if done.is_empty() {
        warn!("no hypothesis reached EOS within {max_len} units");
    }
    let hyps = done
        .into_iter()
        .map(|c| {
            let units = c.key[..c.key.len() - 1].to_vec();
            let mut components = BTreeMap::from([("las".to_string(), c.las)]);
            if lm.is_some() {
                components.insert("lm".to_string(), c.lm);
            }
            Hypothesis {
                words: model.codec().decode(&units).expect("word-recoverable"),
                units,
                total: c.total,
                components,
            }
        })
        .collect();
    Ok(NBestList {
        utt_id: String::new(),
        hyps,
    })
}

/// Best EOS-terminated sequence over every unit string of length up to
/// `max_len` (SOS and EOS are not emittable). Returns the sequence, its
/// score and how many sequences were scored.
pub fn exhaustive_search(
    model: &LasModel,
    features: &FeatureSequence,
    max_len: usize,
) -> Result<(Vec<UnitId>, f64, u64), DecodeError> {
    let emittable: Vec<UnitId> = (0..model.vocab_size() as UnitId).filter(|&u| u != SOS && u != EOS).collect();
    let e = emittable.len() as u64;
    let mut count: u64 = 0;
    let mut layer: u64 = 1;
    for _ in 0..=max_len {
        count = count.saturating_add(layer);
        layer = layer.saturating_mul(e);
    }
    if count > EXHAUSTIVE_BUDGET {
        return Err(DecodeError::Budget(count));
    }
    let enc = model.encode(features)?;
    let mut best: Option<(Vec<UnitId>, f64)> = None;
    let mut frontier: Vec<Vec<UnitId>> = vec![Vec::new()];
    for len in 0..=max_len {
        for chunk in frontier.chunks(256) {
            let scores = model.score_encoded(&enc, chunk)?;
            for (seq, s) in chunk.iter().zip(scores) {
                let better = match &best {
                    None => true,
                    Some((b, bs)) => {
                        let key = |x: &[UnitId]| [x, &[EOS]].concat();
                        rank(s, &key(seq), *bs, &key(b)).is_lt()
                    }
                };
                if better {
                    best = Some((seq.clone(), s));
                }
            }
        }
        if len < max_len {
            frontier = frontier
                .iter()
                .flat_map(|p| emittable.iter().map(move |&u| [p.as_slice(), &[u]].concat()))
                .collect();
        }
    }
    let (units, score) = best.expect("the empty sequence is always scored");
    Ok((units, score, count))
}
