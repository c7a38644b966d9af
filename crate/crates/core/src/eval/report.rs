use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;

const MISSING: &str = "—";

/// A rate in percent, optionally with its oracle rate shown in parentheses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: f64,
    pub oracle: Option<f64>,
}

impl Cell {
    pub fn new(value: f64) -> Self {
        Self { value, oracle: None }
    }

    pub fn with_oracle(value: f64, oracle: f64) -> Self {
        Self { value, oracle: Some(oracle) }
    }

    fn text(&self) -> String {
        match self.oracle {
            Some(o) => format!("{:.2} ({:.2})", self.value, o),
            None => format!("{:.2}", self.value),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub system: String,
    pub cells: Vec<Option<Cell>>,
}

/// Systems by splits, in the layout of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn new(title: &str, columns: &[&str]) -> Self {
        Self {
            title: title.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Adds a row; missing trailing cells are filled with `None`.
    pub fn push(&mut self, system: &str, mut cells: Vec<Option<Cell>>) {
        cells.resize(self.columns.len(), None);
        self.rows.push(Row { system: system.to_string(), cells });
    }

    pub fn get(&self, system: &str, column: &str) -> Option<Cell> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.system == system)?.cells[c]
    }

    /// Aligned plain text.
    pub fn to_txt(&self) -> String {
        let mut grid = vec![std::iter::once("system".to_string()).chain(self.columns.iter().cloned()).collect::<Vec<_>>()];
        for r in &self.rows {
            let mut line = vec![r.system.clone()];
            line.extend(r.cells.iter().map(|c| c.map_or(MISSING.to_string(), |c| c.text())));
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|k| grid.iter().map(|l| l[k].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("{}\n", self.title);
        for (i, line) in grid.iter().enumerate() {
            let mut text = String::new();
            for (k, cell) in line.iter().enumerate() {
                let pad = widths[k] - cell.chars().count();
                if k == 0 {
                    let _ = write!(text, "{cell}{}", " ".repeat(pad));
                } else {
                    let _ = write!(text, "  {}{cell}", " ".repeat(pad));
                }
            }
            out.push_str(text.trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }

    /// Tab-separated values; oracle rates get their own `<column>.oracle`
    /// columns when any row has one.
    pub fn to_tsv(&self) -> String {
        let oracle = self.rows.iter().any(|r| r.cells.iter().flatten().any(|c| c.oracle.is_some()));
        let mut head = vec!["system".to_string()];
        for c in &self.columns {
            head.push(c.clone());
            if oracle {
                head.push(format!("{c}.oracle"));
            }
        }
        let mut out = head.join("\t") + "\n";
        let num = |x: Option<f64>| x.map_or(MISSING.to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            let mut line = vec![r.system.clone()];
            for c in &r.cells {
                line.push(num(c.map(|c| c.value)));
                if oracle {
                    line.push(num(c.and_then(|c| c.oracle)));
                }
            }
            out.push_str(&line.join("\t"));
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.txt` and `<stem>.tsv` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), EvalError> {
        for (ext, body) in [("txt", self.to_txt()), ("tsv", self.to_tsv())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let mut t = Table::new("WER (%)", &["dev", "test"]);
        t.push("grapheme", vec![Some(Cell::new(4.5)), Some(Cell::with_oracle(5.25, 2.0))]);
        t.push("phoneme", vec![Some(Cell::new(12.0))]);
        assert_eq!(
            t.to_txt(),
            "WER (%)\nsystem      dev         test\n----------------------------\ngrapheme   4.50  5.25 (2.00)\nphoneme   12.00            —\n"
        );
        assert_eq!(
            t.to_tsv(),
            "system\tdev\tdev.oracle\ttest\ttest.oracle\ngrapheme\t4.5000\t—\t5.2500\t2.0000\nphoneme\t12.0000\t—\t—\t—\n"
        );
        assert_eq!(t.get("phoneme", "dev"), Some(Cell::new(12.0)));
        assert_eq!(t.get("phoneme", "test"), None);
    }
}
