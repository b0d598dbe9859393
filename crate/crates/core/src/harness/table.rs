//! Result tables: fixed-width text for reading and CSV for machines.

use std::fmt::Write as _;
use std::io::Write;

use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Accuracy as a percentage with two decimals, the way tables print it.
pub fn percent(acc: f64) -> String {
    format!("{:.2}", acc * 100.0)
}

impl ResultTable {
    pub fn new(title: impl Into<String>, columns: &[&str]) -> Self {
        Self {
            title: title.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Digest of the table's contents, printed in its header.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for line in std::iter::once(&self.columns).chain(&self.rows) {
            h.update(line.join("\t").as_bytes());
            h.update(b"\n");
        }
        format!("{:x}", h.finalize())[..16].to_string()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cell lookup by first-column label and column name.
    pub fn cell(&self, label: &str, column: &str) -> Option<&str> {
        let c = self.column(column)?;
        self.rows.iter().find(|r| r[0] == label).map(|r| r[c].as_str())
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(String::len).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = format!("# {}\n# table {}\n", self.title, self.digest());
        let mut line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
                if i == 0 {
                    let _ = write!(s, "{cell:<w$}");
                } else {
                    let _ = write!(s, "  {cell:>w$}");
                }
            }
            out.push_str(s.trim_end());
            out.push('\n');
        };
        line(&self.columns);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&rule);
        for row in &self.rows {
            line(row);
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ResultTable {
        let mut t = ResultTable::new("Demo", &["model", "spec", "test"]);
        t.push(vec!["Zone-based".into(), "abc".into(), percent(0.7314)]);
        t.push(vec!["LSTM, with commas".into(), "def".into(), percent(0.9302)]);
        t
    }

    #[test]
    fn text_is_aligned_and_stable() {
        let text = sample().to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# Demo");
        assert!(lines[1].starts_with("# table "));
        assert_eq!(lines[2].len(), lines[4].len());
        assert!(lines[4].ends_with("73.14"));
        assert_eq!(text, sample().to_text());
    }

    #[test]
    fn csv_quotes_and_round_trips() {
        let csv_text = sample().to_csv().unwrap();
        let mut r = csv::Reader::from_reader(csv_text.as_bytes());
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(&rows[1][0], "LSTM, with commas");
        assert_eq!(&rows[0][2], "73.14");
    }

    #[test]
    fn lookup_by_label() {
        let t = sample();
        assert_eq!(t.cell("Zone-based", "test"), Some("73.14"));
        assert_eq!(t.cell("missing", "test"), None);
    }
}
