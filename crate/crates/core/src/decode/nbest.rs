use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::DecodeError;
use crate::units::UnitId;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub words: Vec<String>,
    /// Units of the producing model; empty once read back from a file.
    pub units: Vec<UnitId>,
    /// Log-domain total, higher is better.
    pub total: f64,
    /// Log score per model name.
    pub components: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NBestList {
    pub utt_id: String,
    pub hyps: Vec<Hypothesis>,
}

impl NBestList {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hyps.first()
    }

    pub fn len(&self) -> usize {
        self.hyps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hyps.is_empty()
    }

    /// Sorts by total (descending); ties keep their current order.
    pub fn sort(&mut self) {
        self.hyps.sort_by(|a, b| b.total.total_cmp(&a.total));
    }
}

fn score(x: f64) -> String {
    format!("{x:.9}")
}

/// `UTT <id>` then `RANK k TOTAL t [COMP name=s ...] WORDS w ...` per
/// hypothesis.
pub fn write_nbest(lists: &[NBestList]) -> String {
    let mut out = String::new();
    for l in lists {
        writeln!(out, "UTT {}", l.utt_id).unwrap();
        for (k, h) in l.hyps.iter().enumerate() {
            write!(out, "RANK {} TOTAL {}", k + 1, score(h.total)).unwrap();
            if !h.components.is_empty() {
                out.push_str(" COMP");
                for (name, s) in &h.components {
                    write!(out, " {name}={}", score(*s)).unwrap();
                }
            }
            out.push_str(" WORDS");
            for w in &h.words {
                write!(out, " {w}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn parse_nbest(text: &str) -> Result<Vec<NBestList>, DecodeError> {
    let mut lists: Vec<NBestList> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| DecodeError::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split(' ').collect();
        if f[0] == "UTT" && f.len() == 2 && !f[1].is_empty() {
            lists.push(NBestList {
                utt_id: f[1].to_string(),
                hyps: Vec::new(),
            });
            continue;
        }
        let list = lists.last_mut().ok_or_else(|| err("hypothesis before any UTT line".into()))?;
        if f.len() < 5 || f[0] != "RANK" || f[2] != "TOTAL" {
            return Err(err(format!("expected a RANK line, found `{line}`")));
        }
        let rank: usize = f[1].parse().map_err(|_| err(format!("bad rank `{}`", f[1])))?;
        if rank != list.hyps.len() + 1 {
            return Err(err(format!("rank {rank} out of order")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad score `{s}`")));
        let total = num(f[3])?;
        let mut k = 4;
        let mut components = BTreeMap::new();
        if f[k] == "COMP" {
            k += 1;
            while k < f.len() && f[k] != "WORDS" {
                let (name, s) = f[k].split_once('=').ok_or_else(|| err(format!("bad component `{}`", f[k])))?;
                components.insert(name.to_string(), num(s)?);
                k += 1;
            }
        }
        if f.get(k) != Some(&"WORDS") {
            return Err(err("missing WORDS".into()));
        }
        list.hyps.push(Hypothesis {
            words: f[k + 1..].iter().map(|w| w.to_string()).collect(),
            units: Vec::new(),
            total,
            components,
        });
    }
    Ok(lists)
}

pub fn read_nbest(path: &Path) -> Result<Vec<NBestList>, DecodeError> {
    let text = std::fs::read_to_string(path).map_err(|e| DecodeError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_nbest(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_is_exact() {
        let text = "UTT a\nRANK 1 TOTAL -1.250000000 COMP las=-1.250000000 WORDS THE SUN\n\
                    RANK 2 TOTAL -inf COMP las=-2.000000000 phoneme=-inf WORDS\nUTT b\n";
        let lists = parse_nbest(text).unwrap();
        assert_eq!(lists.len(), 2);
        assert_eq!(lists[0].hyps[1].words, Vec::<String>::new());
        assert_eq!(lists[0].hyps[1].total, f64::NEG_INFINITY);
        assert_eq!(write_nbest(&lists), text);
    }

    #[test]
    fn malformed_lines_name_the_line() {
        let e = parse_nbest("UTT a\nRANK 2 TOTAL 0 WORDS X\n").unwrap_err();
        assert!(matches!(e, DecodeError::Parse { line: 2, .. }));
        assert!(parse_nbest("RANK 1 TOTAL 0 WORDS\n").is_err());
    }
}
