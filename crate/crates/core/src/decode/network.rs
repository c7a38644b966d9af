use std::collections::{BTreeMap, HashMap};

use log::warn;

use super::{BeamConfig, DecodeError, Hypothesis, NBestList};
use crate::corpus::FeatureSequence;
use crate::lmfst::{Label, StateId, Wfst, EPSILON};
use crate::neural::{DecoderState, LasModel};
use crate::units::{UnitId, UnitKind, EOS, SOS};

#[derive(Clone)]
struct Token {
    fst: StateId,
    units: Vec<UnitId>,
    words: Vec<Label>,
    las: f64,
    /// Accumulated network cost (negative log).
    cost: f64,
    total: f64,
    /// Index into the step's decoder states.
    dec: usize,
}

fn better(a: &Token, b: &Token, words: &dyn Fn(&[Label]) -> Vec<String>) -> std::cmp::Ordering {
    b.total
        .total_cmp(&a.total)
        .then_with(|| a.units.cmp(&b.units))
        .then_with(|| words(&a.words).cmp(&words(&b.words)))
        .then_with(|| a.fst.cmp(&b.fst))
}

/// Epsilon-input closure of one token: every state reachable through
/// epsilon arcs, at its cheapest cost.
fn closure(net: &Wfst, tok: &Token) -> Vec<(StateId, Vec<Label>, f64)> {
    let mut best: HashMap<(StateId, Vec<Label>), f64> = HashMap::new();
    let mut stack = vec![(tok.fst, Vec::new(), 0.0)];
    best.insert((tok.fst, Vec::new()), 0.0);
    while let Some((s, out, w)) = stack.pop() {
        if best.get(&(s, out.clone())).is_some_and(|&b| b < w) {
            continue;
        }
        for a in net.arcs(s).iter().filter(|a| a.ilabel == EPSILON) {
            let mut o: Vec<Label> = out.clone();
            if a.olabel != EPSILON {
                o.push(a.olabel);
            }
            let nw = w + a.weight;
            let key = (a.next, o.clone());
            if best.get(&key).is_none_or(|&b| nw < b) {
                best.insert(key, nw);
                stack.push((a.next, o, nw));
            }
        }
    }
    let mut out: Vec<_> = best.into_iter().map(|((s, o), w)| (s, o, w)).collect();
    out.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    out
}

/// Token passing over the search network for a phoneme model. Consuming
/// arcs take one decoder step; epsilon arcs are free apart from their
/// weight. Network weights are scaled by `lm_weight` as they are crossed.
/// Hypotheses complete when EOS is emitted in a final state. The list is
/// unique by word sequence.
pub fn wfst_beam_search(
    model: &LasModel,
    network: &Wfst,
    features: &FeatureSequence,
    cfg: &BeamConfig,
) -> Result<NBestList, DecodeError> {
    let inv = model.codec().inventory();
    if inv.kind() != UnitKind::Phoneme {
        return Err(DecodeError::InventoryMismatch(format!(
            "transducer search needs a phoneme model, got {}",
            inv.kind().name()
        )));
    }
    if features.num_frames() == 0 {
        return Err(DecodeError::EmptyFeatures);
    }
    let isyms = network.isyms();
    let mut unit_of = vec![None; isyms.len()];
    for l in 1..isyms.len() as Label {
        let sym = isyms.symbol(l).expect("label in table");
        let u = inv
            .id(sym)
            .ok_or_else(|| DecodeError::InventoryMismatch(format!("network symbol `{sym}` is not a model unit")))?;
        unit_of[l as usize] = Some(u);
    }
    let word_names = |ls: &[Label]| -> Vec<String> {
        ls.iter().map(|&l| network.osyms().symbol(l).unwrap_or("<?>").to_string()).collect()
    };
    let enc = model.encode(features)?;
    let max_len = cfg.max_len(enc.steps());
    let beam = cfg.beam.max(1);
    let lambda = cfg.lm_weight;

    let mut dec_states: Vec<DecoderState> = vec![model.initial_state()];
    let mut live = vec![Token {
        fst: network.start(),
        units: Vec::new(),
        words: Vec::new(),
        las: 0.0,
        cost: 0.0,
        total: 0.0,
        dec: 0,
    }];
    let mut done: Vec<Token> = Vec::new();
    for t in 0..=max_len {
        // one decoder step per distinct unit prefix
        let mut prefix_index: HashMap<Vec<UnitId>, usize> = HashMap::new();
        let mut rows: Vec<usize> = Vec::new();
        let mut prevs: Vec<UnitId> = Vec::new();
        let row_of: Vec<usize> = live
            .iter()
            .map(|tok| {
                *prefix_index.entry(tok.units.clone()).or_insert_with(|| {
                    rows.push(tok.dec);
                    prevs.push(tok.units.last().copied().unwrap_or(SOS));
                    rows.len() - 1
                })
            })
            .collect();
        let (next_states, logp) = model.step(&enc, &rows.iter().map(|&r| &dec_states[r]).collect::<Vec<_>>(), &prevs);

        let mut cands: HashMap<(bool, StateId, Vec<UnitId>, Vec<Label>), Token> = HashMap::new();
        let mut offer = |key: (bool, StateId, Vec<UnitId>, Vec<Label>), tok: Token| match cands.get(&key) {
            Some(old) if old.total >= tok.total => {}
            _ => {
                cands.insert(key, tok);
            }
        };
        for (tok, &row) in live.iter().zip(&row_of) {
            for (s, out, w) in closure(network, tok) {
                let mut words = tok.words.clone();
                words.extend(&out);
                let cost = tok.cost + w;
                if let Some(f) = network.final_weight(s) {
                    let las = tok.las + logp.get(row, EOS as usize);
                    let cost = cost + f;
                    let done_tok = Token {
                        fst: s,
                        units: tok.units.clone(),
                        words: words.clone(),
                        las,
                        cost,
                        total: las - lambda * cost,
                        dec: row,
                    };
                    offer((true, 0, Vec::new(), words.clone()), done_tok);
                }
                if t == max_len {
                    continue;
                }
                for a in network.arcs(s).iter().filter(|a| a.ilabel != EPSILON) {
                    let u = unit_of[a.ilabel as usize].expect("mapped");
                    let las = tok.las + logp.get(row, u as usize);
                    let cost = cost + a.weight;
                    let mut units = tok.units.clone();
                    units.push(u);
                    let mut w2 = words.clone();
                    if a.olabel != EPSILON {
                        w2.push(a.olabel);
                    }
                    let nt = Token {
                        fst: a.next,
                        units: units.clone(),
                        words: w2.clone(),
                        las,
                        cost,
                        total: las - lambda * cost,
                        dec: row,
                    };
                    offer((false, a.next, units, w2), nt);
                }
            }
        }
        let mut pool: Vec<(bool, Token)> = cands.into_iter().map(|((eos, ..), tok)| (eos, tok)).collect();
        pool.sort_by(|a, b| better(&a.1, &b.1, &word_names).then(b.0.cmp(&a.0)));
        pool.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (eos, tok) in pool {
            if eos {
                done.push(tok);
            } else {
                next.push(tok);
            }
        }
        // merge finished hypotheses by words
        done.sort_by(|a, b| better(a, b, &word_names));
        let mut seen = std::collections::HashSet::new();
        done.retain(|d| seen.insert(d.words.clone()));
        done.truncate(beam);
        dec_states = next_states;
        live = next;
        if live.is_empty() {
            break;
        }
        if done.len() == beam && live.iter().all(|tok| tok.total < done[beam - 1].total) {
            break;
        }
    }
    if done.is_empty() {
        warn!("no hypothesis completed in a final network state within {max_len} units");
    }
    let hyps = done
        .into_iter()
        .map(|d| Hypothesis {
            words: word_names(&d.words),
            units: d.units,
            total: d.total,
            components: BTreeMap::from([("las".to_string(), d.las), ("lm".to_string(), -d.cost)]),
        })
        .collect();
    Ok(NBestList {
        utt_id: String::new(),
        hyps,
    })
}
