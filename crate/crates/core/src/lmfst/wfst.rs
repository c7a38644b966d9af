//! Weighted transducers over the tropical semiring (weights are costs,
//! paths add, best is min).

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::FstError;

pub type StateId = usize;
pub type Label = u32;
pub const EPSILON: Label = 0;
pub const EPSILON_SYMBOL: &str = "<eps>";

/// Label ↔ symbol map. Label 0 is always epsilon.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolTable {
    symbols: Vec<String>,
    index: HashMap<String, Label>,
}

impl Default for SymbolTable {
    fn default() -> Self {
        Self::new()
    }
}

impl SymbolTable {
    pub fn new() -> Self {
        let mut t = Self {
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        t.add(EPSILON_SYMBOL);
        t
    }

    /// Returns the label of `symbol`, adding it if needed.
    pub fn add(&mut self, symbol: &str) -> Label {
        if let Some(&l) = self.index.get(symbol) {
            return l;
        }
        let l = self.symbols.len() as Label;
        self.symbols.push(symbol.to_string());
        self.index.insert(symbol.to_string(), l);
        l
    }

    pub fn label(&self, symbol: &str) -> Option<Label> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, label: Label) -> Option<&str> {
        self.symbols.get(label as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.len() <= 1
    }

    /// `symbol label` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.symbols.iter().enumerate() {
            writeln!(out, "{s} {i}").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, FstError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(sym), Some(id), None) = (it.next(), it.next(), it.next()) else {
                return Err(FstError::Parse {
                    line: i + 1,
                    msg: "expected `symbol label`".into(),
                });
            };
            let id: usize = id.parse().map_err(|_| FstError::Parse {
                line: i + 1,
                msg: format!("bad label `{id}`"),
            })?;
            pairs.push((id, sym.to_string(), i + 1));
        }
        pairs.sort();
        let mut t = SymbolTable {
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        for (id, sym, line) in pairs {
            if id != t.symbols.len() || (id == 0 && sym != EPSILON_SYMBOL) {
                return Err(FstError::Parse {
                    line,
                    msg: "labels must be dense from 0 with 0 = <eps>".into(),
                });
            }
            if t.index.insert(sym.clone(), id as Label).is_some() {
                return Err(FstError::Parse {
                    line,
                    msg: format!("duplicate symbol `{sym}`"),
                });
            }
            t.symbols.push(sym);
        }
        if t.symbols.is_empty() {
            return Ok(SymbolTable::new());
        }
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arc {
    pub ilabel: Label,
    pub olabel: Label,
    pub weight: f64,
    pub next: StateId,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct State {
    arcs: Vec<Arc>,
    final_weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Wfst {
    states: Vec<State>,
    start: StateId,
    isyms: SymbolTable,
    osyms: SymbolTable,
}

impl Wfst {
    /// A single non-final start state and no arcs.
    pub fn new(isyms: SymbolTable, osyms: SymbolTable) -> Self {
        Self {
            states: vec![State::default()],
            start: 0,
            isyms,
            osyms,
        }
    }

    pub fn add_state(&mut self) -> StateId {
        self.states.push(State::default());
        self.states.len() - 1
    }

    pub fn set_start(&mut self, s: StateId) -> Result<(), FstError> {
        self.check_state(s)?;
        self.start = s;
        Ok(())
    }

    pub fn set_final(&mut self, s: StateId, weight: f64) -> Result<(), FstError> {
        self.check_state(s)?;
        check_weight(weight)?;
        self.states[s].final_weight = Some(weight);
        Ok(())
    }

    pub fn add_arc(&mut self, from: StateId, arc: Arc) -> Result<(), FstError> {
        self.check_state(from)?;
        self.check_state(arc.next)?;
        check_weight(arc.weight)?;
        if arc.ilabel as usize >= self.isyms.len() || arc.olabel as usize >= self.osyms.len() {
            return Err(FstError::BadLabel);
        }
        self.states[from].arcs.push(arc);
        Ok(())
    }

    fn check_state(&self, s: StateId) -> Result<(), FstError> {
        if s < self.states.len() {
            Ok(())
        } else {
            Err(FstError::BadState(s))
        }
    }

    pub fn start(&self) -> StateId {
        self.start
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.states.iter().map(|s| s.arcs.len()).sum()
    }

    pub fn arcs(&self, s: StateId) -> &[Arc] {
        &self.states[s].arcs
    }

    pub fn final_weight(&self, s: StateId) -> Option<f64> {
        self.states[s].final_weight
    }

    pub fn isyms(&self) -> &SymbolTable {
        &self.isyms
    }

    pub fn osyms(&self) -> &SymbolTable {
        &self.osyms
    }

    /// Drops states that are not both reachable from the start and able to
    /// reach a final state. The start state is always kept (as state 0).
    pub fn connect(&self) -> Wfst {
        let n = self.states.len();
        let mut reach = vec![false; n];
        let mut queue = VecDeque::from([self.start]);
        reach[self.start] = true;
        while let Some(s) = queue.pop_front() {
            for a in &self.states[s].arcs {
                if !reach[a.next] {
                    reach[a.next] = true;
                    queue.push_back(a.next);
                }
            }
        }
        let mut rev: Vec<Vec<StateId>> = vec![Vec::new(); n];
        for (s, st) in self.states.iter().enumerate() {
            for a in &st.arcs {
                rev[a.next].push(s);
            }
        }
        let mut coreach = vec![false; n];
        let mut queue: VecDeque<StateId> = (0..n).filter(|&s| self.states[s].final_weight.is_some()).collect();
        for &s in &queue {
            coreach[s] = true;
        }
        while let Some(s) = queue.pop_front() {
            for &p in &rev[s] {
                if !coreach[p] {
                    coreach[p] = true;
                    queue.push_back(p);
                }
            }
        }
        let keep = |s: StateId| reach[s] && coreach[s];
        let mut map = vec![usize::MAX; n];
        let mut out = Wfst::new(self.isyms.clone(), self.osyms.clone());
        map[self.start] = 0;
        for s in (0..n).filter(|&s| s != self.start && keep(s)) {
            map[s] = out.add_state();
        }
        for s in (0..n).filter(|&s| map[s] != usize::MAX) {
            out.states[map[s]].final_weight = self.states[s].final_weight;
            for a in &self.states[s].arcs {
                if keep(s) && keep(a.next) {
                    out.states[map[s]].arcs.push(Arc { next: map[a.next], ..*a });
                }
            }
        }
        out
    }

    /// AT&T text: `src dst ilabel olabel weight` per arc, `state weight` per
    /// final state. Arcs of the start state come first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let order = std::iter::once(self.start).chain((0..self.states.len()).filter(|&s| s != self.start));
        for s in order.clone() {
            for a in &self.states[s].arcs {
                writeln!(out, "{s} {} {} {} {}", a.next, a.ilabel, a.olabel, a.weight).unwrap();
            }
        }
        for s in order {
            if let Some(w) = self.states[s].final_weight {
                writeln!(out, "{s} {w}").unwrap();
            }
        }
        out
    }

    pub fn parse(text: &str, isyms: SymbolTable, osyms: SymbolTable) -> Result<Wfst, FstError> {
        let mut fst = Wfst::new(isyms, osyms);
        let mut start = None;
        let err = |line: usize, msg: &str| FstError::Parse {
            line,
            msg: msg.to_string(),
        };
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let state = |x: &str| x.parse::<usize>().map_err(|_| err(line_no, "bad state"));
            let weight = |x: &str| x.parse::<f64>().map_err(|_| err(line_no, "bad weight"));
            let label = |x: &str| x.parse::<Label>().map_err(|_| err(line_no, "bad label"));
            let src = state(f[0])?;
            start.get_or_insert(src);
            let grow = |fst: &mut Wfst, s: usize| {
                while fst.states.len() <= s {
                    fst.add_state();
                }
            };
            grow(&mut fst, src);
            match f.len() {
                1 | 2 => {
                    let w = if f.len() == 2 { weight(f[1])? } else { 0.0 };
                    fst.set_final(src, w).map_err(|e| err(line_no, &e.to_string()))?;
                }
                4 | 5 => {
                    let dst = state(f[1])?;
                    grow(&mut fst, dst);
                    let arc = Arc {
                        ilabel: label(f[2])?,
                        olabel: label(f[3])?,
                        weight: if f.len() == 5 { weight(f[4])? } else { 0.0 },
                        next: dst,
                    };
                    fst.add_arc(src, arc).map_err(|e| err(line_no, &e.to_string()))?;
                }
                _ => return Err(err(line_no, "expected an arc or a final-state line")),
            }
        }
        fst.start = start.unwrap_or(0);
        Ok(fst)
    }

    /// Writes `<path>`, `<path>.isyms` and `<path>.osyms`.
    pub fn save(&self, path: &Path) -> Result<(), FstError> {
        write(path, &self.to_text())?;
        write(&sidecar(path, "isyms"), &self.isyms.to_text())?;
        write(&sidecar(path, "osyms"), &self.osyms.to_text())
    }

    pub fn load(path: &Path) -> Result<Wfst, FstError> {
        let isyms = SymbolTable::parse(&read(&sidecar(path, "isyms"))?)?;
        let osyms = SymbolTable::parse(&read(&sidecar(path, "osyms"))?)?;
        Wfst::parse(&read(path)?, isyms, osyms)
    }
}

fn check_weight(w: f64) -> Result<(), FstError> {
    if w.is_finite() {
        Ok(())
    } else {
        Err(FstError::BadWeight(w))
    }
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}

fn write(path: &Path, text: &str) -> Result<(), FstError> {
    std::fs::write(path, text).map_err(|e| FstError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn read(path: &Path) -> Result<String, FstError> {
    std::fs::read_to_string(path).map_err(|e| FstError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Composition with the sequencing epsilon filter: an epsilon-output move
/// on the left is not allowed right after an epsilon-input move on the right,
/// so each distinct path pair is generated once. Symbols are matched by name.
pub fn compose(left: &Wfst, right: &Wfst) -> Result<Wfst, FstError> {
    let mut to_right = vec![None; left.osyms.len()];
    for l in 1..left.osyms.len() as Label {
        let sym = left.osyms.symbol(l).unwrap();
        match right.isyms.label(sym) {
            Some(r) => to_right[l as usize] = Some(r),
            None => return Err(FstError::AlphabetMismatch(sym.to_string())),
        }
    }
    let mut out = Wfst::new(left.isyms.clone(), right.osyms.clone());
    let mut ids: HashMap<(StateId, StateId, u8), StateId> = HashMap::new();
    let mut queue = VecDeque::new();
    let start = (left.start, right.start, 0u8);
    ids.insert(start, 0);
    queue.push_back(start);

    // right arcs bucketed by input label, per state
    let mut by_label: Vec<HashMap<Label, Vec<Arc>>> = vec![HashMap::new(); right.num_states()];
    for (s, st) in right.states.iter().enumerate() {
        for a in &st.arcs {
            by_label[s].entry(a.ilabel).or_default().push(*a);
        }
    }

    type Key = (StateId, StateId, u8);
    fn intern(ids: &mut HashMap<Key, StateId>, key: Key, out: &mut Wfst, queue: &mut VecDeque<Key>) -> StateId {
        *ids.entry(key).or_insert_with(|| {
            queue.push_back(key);
            out.add_state()
        })
    }

    while let Some(key @ (l, r, f)) = queue.pop_front() {
        let src = ids[&key];
        if let (Some(wl), Some(wr)) = (left.final_weight(l), right.final_weight(r)) {
            out.states[src].final_weight = Some(wl + wr);
        }
        for a in left.arcs(l) {
            if a.olabel == EPSILON {
                if f == 0 {
                    let dst = intern(&mut ids, (a.next, r, 0), &mut out, &mut queue);
                    out.states[src].arcs.push(Arc { next: dst, ..*a });
                }
                continue;
            }
            let lab = to_right[a.olabel as usize].unwrap();
            if let Some(matches) = by_label[r].get(&lab) {
                for b in matches {
                    let dst = intern(&mut ids, (a.next, b.next, 0), &mut out, &mut queue);
                    out.states[src].arcs.push(Arc {
                        ilabel: a.ilabel,
                        olabel: b.olabel,
                        weight: a.weight + b.weight,
                        next: dst,
                    });
                }
            }
        }
        if let Some(eps) = by_label[r].get(&EPSILON) {
            for b in eps {
                let dst = intern(&mut ids, (l, b.next, 1), &mut out, &mut queue);
                out.states[src].arcs.push(Arc {
                    ilabel: EPSILON,
                    olabel: b.olabel,
                    weight: b.weight,
                    next: dst,
                });
            }
        }
    }
    Ok(out.connect())
}

/// Minimum weight over accepting paths reading `input` (epsilon arcs are
/// free moves). `None` if the input is rejected.
pub fn best_path_weight(fst: &Wfst, input: &[Label]) -> Option<f64> {
    best_path_dp(fst, input, None)
}

/// As [`best_path_weight`] but the path must also emit exactly `output`.
pub fn best_path_weight_with_output(fst: &Wfst, input: &[Label], output: &[Label]) -> Option<f64> {
    best_path_dp(fst, input, Some(output))
}

fn best_path_dp(fst: &Wfst, input: &[Label], output: Option<&[Label]>) -> Option<f64> {
    let olen = output.map_or(0, <[Label]>::len);
    let ocols = olen + 1;
    let idx = |s: StateId, o: usize| s * ocols + o;
    let size = fst.num_states() * ocols;
    let mut layer = vec![f64::INFINITY; size];
    layer[idx(fst.start, 0)] = 0.0;

    // Output match for an arc at output position `o`; `None` means blocked.
    let advance = |olabel: Label, o: usize| -> Option<usize> {
        match output {
            None => Some(0),
            Some(_) if olabel == EPSILON => Some(o),
            Some(out) => (o < out.len() && out[o] == olabel).then_some(o + 1),
        }
    };

    for pos in 0..=input.len() {
        // epsilon-input closure within the layer, label-correcting
        let mut queue: VecDeque<usize> = (0..size).filter(|&i| layer[i].is_finite()).collect();
        let mut queued = vec![false; size];
        for &i in &queue {
            queued[i] = true;
        }
        while let Some(i) = queue.pop_front() {
            queued[i] = false;
            let (s, o) = (i / ocols, i % ocols);
            for a in fst.arcs(s).iter().filter(|a| a.ilabel == EPSILON) {
                if let Some(o2) = advance(a.olabel, o) {
                    let j = idx(a.next, o2);
                    let w = layer[i] + a.weight;
                    if w < layer[j] {
                        layer[j] = w;
                        if !queued[j] {
                            queued[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        if pos == input.len() {
            break;
        }
        let mut next = vec![f64::INFINITY; size];
        for i in (0..size).filter(|&i| layer[i].is_finite()) {
            let (s, o) = (i / ocols, i % ocols);
            for a in fst.arcs(s).iter().filter(|a| a.ilabel == input[pos]) {
                if let Some(o2) = advance(a.olabel, o) {
                    let j = idx(a.next, o2);
                    next[j] = next[j].min(layer[i] + a.weight);
                }
            }
        }
        layer = next;
    }
    let best = (0..fst.num_states())
        .filter_map(|s| fst.final_weight(s).map(|f| layer[idx(s, olen)] + f))
        .fold(f64::INFINITY, f64::min);
    best.is_finite().then_some(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    fn syms(names: &[&str]) -> SymbolTable {
        let mut t = SymbolTable::new();
        for n in names {
            t.add(n);
        }
        t
    }

    fn arc(i: Label, o: Label, w: f64, next: StateId) -> Arc {
        Arc {
            ilabel: i,
            olabel: o,
            weight: w,
            next,
        }
    }

    /// Dijkstra over (state, position) with costs scaled to integers.
    fn dijkstra(fst: &Wfst, input: &[Label]) -> Option<f64> {
        let scale = 1e6;
        let mut dist: HashMap<(StateId, usize), i64> = HashMap::new();
        let mut heap = BinaryHeap::from([Reverse((0i64, fst.start(), 0usize))]);
        let mut best: Option<i64> = None;
        while let Some(Reverse((d, s, p))) = heap.pop() {
            if dist.get(&(s, p)).is_some_and(|&e| e <= d) {
                continue;
            }
            dist.insert((s, p), d);
            if p == input.len() {
                if let Some(f) = fst.final_weight(s) {
                    let t = d + (f * scale).round() as i64;
                    best = Some(best.map_or(t, |b| b.min(t)));
                }
            }
            for a in fst.arcs(s) {
                let w = (a.weight * scale).round() as i64;
                if a.ilabel == EPSILON {
                    heap.push(Reverse((d + w, a.next, p)));
                } else if p < input.len() && a.ilabel == input[p] {
                    heap.push(Reverse((d + w, a.next, p + 1)));
                }
            }
        }
        best.map(|b| b as f64 / scale)
    }

    #[test]
    fn single_zero_path() {
        let mut f = Wfst::new(syms(&["a"]), syms(&["x"]));
        let s = f.add_state();
        f.add_arc(0, arc(1, 1, 0.0, s)).unwrap();
        f.set_final(s, 0.0).unwrap();
        assert_eq!(best_path_weight(&f, &[1]), Some(0.0));
        assert_eq!(best_path_weight(&f, &[1, 1]), None);
        assert_eq!(best_path_weight(&f, &[]), None);
    }

    #[test]
    fn rejects_invalid_arcs() {
        let mut f = Wfst::new(syms(&["a"]), syms(&["x"]));
        assert!(matches!(f.add_arc(0, arc(1, 1, 0.0, 5)), Err(FstError::BadState(5))));
        assert!(matches!(f.add_arc(0, arc(7, 1, 0.0, 0)), Err(FstError::BadLabel)));
        assert!(matches!(f.add_arc(0, arc(1, 1, f64::NAN, 0)), Err(FstError::BadWeight(_))));
    }

    fn random_fst(rng: &mut impl Rng) -> Wfst {
        let mut f = Wfst::new(syms(&["a", "b"]), syms(&["x"]));
        let n = rng.random_range(1..7);
        for _ in 1..n {
            f.add_state();
        }
        for s in 0..n {
            for _ in 0..rng.random_range(0..4) {
                let i = rng.random_range(0..3);
                let w = (rng.random_range(0..1000) as f64) / 100.0;
                f.add_arc(s, arc(i, 0, w, rng.random_range(0..n))).unwrap();
            }
            if rng.random_bool(0.4) {
                f.set_final(s, rng.random_range(0..500) as f64 / 100.0).unwrap();
            }
        }
        f
    }

    #[test]
    fn matches_dijkstra_on_random_fsts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let f = random_fst(&mut rng);
            let len = rng.random_range(0..5);
            let input: Vec<Label> = (0..len).map(|_| rng.random_range(1..3)).collect();
            let got = best_path_weight(&f, &input);
            let want = dijkstra(&f, &input);
            match (got, want) {
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-6, "{g} vs {w}"),
                (g, w) => assert_eq!(g.is_some(), w.is_some()),
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let f = random_fst(&mut rng).connect();
            let g = Wfst::parse(&f.to_text(), f.isyms.clone(), f.osyms.clone()).unwrap();
            if f.num_arcs() > 0 || f.final_weight(0).is_some() {
                assert_eq!(f.to_text(), g.to_text());
            }
        }
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = Wfst::new(syms(&["a", "b"]), syms(&["x"]));
        let s = f.add_state();
        f.add_arc(0, arc(1, 1, 0.1 + 0.2, s)).unwrap();
        f.add_arc(s, arc(2, 0, 1.0 / 3.0, 0)).unwrap();
        f.set_final(0, 0.0).unwrap();
        let path = dir.path().join("g.fst");
        f.save(&path).unwrap();
        assert_eq!(Wfst::load(&path).unwrap(), f);
    }

    #[test]
    fn compose_checks_alphabets() {
        let left = Wfst::new(syms(&["a"]), syms(&["x", "y"]));
        let right = Wfst::new(syms(&["x"]), syms(&["x"]));
        assert!(matches!(compose(&left, &right), Err(FstError::AlphabetMismatch(s)) if s == "y"));
    }

    #[test]
    fn compose_with_epsilons_sums_weights() {
        // left: a:x/1 then b:<eps>/2 ; right: <eps> backoff/0.5 then x:x/0.25
        let mut left = Wfst::new(syms(&["a", "b"]), syms(&["x"]));
        let l1 = left.add_state();
        let l2 = left.add_state();
        left.add_arc(0, arc(1, 1, 1.0, l1)).unwrap();
        left.add_arc(l1, arc(2, 0, 2.0, l2)).unwrap();
        left.set_final(l2, 0.0).unwrap();
        let mut right = Wfst::new(syms(&["x"]), syms(&["x"]));
        let r1 = right.add_state();
        let r2 = right.add_state();
        right.add_arc(0, arc(0, 0, 0.5, r1)).unwrap();
        right.add_arc(r1, arc(1, 1, 0.25, r2)).unwrap();
        right.set_final(r2, 0.125).unwrap();
        let c = compose(&left, &right).unwrap();
        assert_eq!(best_path_weight(&c, &[1, 2]), Some(3.875));
        assert_eq!(best_path_weight_with_output(&c, &[1, 2], &[1]), Some(3.875));
        assert_eq!(best_path_weight_with_output(&c, &[1, 2], &[]), None);
    }

    #[test]
    fn empty_right_language_gives_no_paths() {
        let mut left = Wfst::new(syms(&["a"]), syms(&["x"]));
        left.add_arc(0, arc(1, 1, 0.0, 0)).unwrap();
        left.set_final(0, 0.0).unwrap();
        let right = Wfst::new(syms(&["x"]), syms(&["x"]));
        let c = compose(&left, &right).unwrap();
        assert_eq!(c.num_arcs(), 0);
        assert_eq!(best_path_weight(&c, &[]), None);
        assert_eq!(best_path_weight(&c, &[1]), None);
    }
}
