use std::collections::BTreeMap;

use super::ngram::{NGramLm, WordId};
use super::wfst::{Arc, Label, StateId, SymbolTable, Wfst, EPSILON};
use super::FstError;
use crate::corpus::Lexicon;
use crate::units::{build_phoneme_inventory, UNK_SYMBOL};

/// Input symbols of L: the phoneme inventory minus `<s>`, `</s>`, `<unk>`.
pub fn lexicon_input_symbols(lexicon: &Lexicon) -> SymbolTable {
    let inv = build_phoneme_inventory(lexicon);
    let mut t = SymbolTable::new();
    for s in &inv.symbols()[3..] {
        t.add(s);
    }
    t
}

/// L: a closure over word paths. Every pronunciation is a chain of phoneme
/// arcs plus a final `<eow>` arc back to the start; the first arc emits the
/// word. State 0 is both start and the only final state.
pub fn build_lexicon_fst(lexicon: &Lexicon) -> Result<Wfst, FstError> {
    if lexicon.is_empty() {
        return Err(FstError::EmptyLexicon);
    }
    let isyms = lexicon_input_symbols(lexicon);
    let mut osyms = SymbolTable::new();
    for w in lexicon.words().filter(|w| *w != UNK_SYMBOL) {
        osyms.add(w);
    }
    let eow = isyms.label(crate::units::EOW_SYMBOL).expect("inventory has <eow>");
    let mut fst = Wfst::new(isyms, osyms);
    fst.set_final(0, 0.0)?;
    for (word, prons) in lexicon.entries() {
        let Some(olabel) = fst.osyms().label(word) else { continue };
        for pron in prons {
            let labels: Vec<Label> = pron
                .iter()
                .map(|p| fst.isyms().label(p).expect("phoneme in inventory"))
                .chain(std::iter::once(eow))
                .collect();
            let mut src = 0;
            for (k, &ilabel) in labels.iter().enumerate() {
                let next = if k + 1 == labels.len() { 0 } else { fst.add_state() };
                let out = if k == 0 { olabel } else { EPSILON };
                fst.add_arc(src, Arc { ilabel, olabel: out, weight: 0.0, next })?;
                src = next;
            }
        }
    }
    Ok(fst)
}

/// G: one state per stored LM context. Word arcs cost −log p(w|h) and lead
/// to the longest stored suffix of `h w`; each non-empty context has an
/// epsilon arc to its backoff context costing −log α(h). Final weights are
/// −log p(</s>|h) (zero when the LM does not model sentence ends).
pub fn build_grammar_fst(lm: &NGramLm) -> Wfst {
    let mut syms = SymbolTable::new();
    let mut label_of: BTreeMap<WordId, Label> = BTreeMap::new();
    for (id, w) in lm.words() {
        label_of.insert(id, syms.add(w));
    }
    let mut fst = Wfst::new(syms.clone(), syms);
    let mut state_of: BTreeMap<&[WordId], StateId> = BTreeMap::new();
    let bos = [lm.bos()];
    let start_ctx = lm.state_context(&bos);
    state_of.insert(start_ctx, 0);
    for ctx in lm.contexts().keys() {
        if ctx.as_slice() != start_ctx {
            state_of.insert(ctx.as_slice(), fst.add_state());
        }
    }
    for (ctx, entry) in lm.contexts() {
        let src = state_of[ctx.as_slice()];
        for (&w, &p) in &entry.probs {
            let Some(&label) = label_of.get(&w) else { continue };
            let mut h = ctx.clone();
            h.push(w);
            let dst = state_of[lm.state_context(&h)];
            fst.add_arc(src, Arc { ilabel: label, olabel: label, weight: -p.ln(), next: dst })
                .expect("valid grammar arc");
        }
        if !ctx.is_empty() {
            let dst = state_of[&ctx[1..]];
            fst.add_arc(src, Arc { ilabel: EPSILON, olabel: EPSILON, weight: -entry.backoff.ln(), next: dst })
                .expect("valid backoff arc");
        }
        let fin = lm.eos().map_or(0.0, |e| -lm.prob(ctx, e).ln());
        fst.set_final(src, fin).expect("finite final weight");
    }
    fst
}
