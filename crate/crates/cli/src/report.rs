//! Tabular command output, rendered either as CSV or as aligned text.

use std::fmt::Write as _;

use clap::ValueEnum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    Csv,
    #[default]
    Table,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    /// Printed at full precision in CSV and with `decimals` in tables.
    Num { value: f64, decimals: usize },
    Int(u64),
}

impl Cell {
    pub fn num(value: f64, decimals: usize) -> Cell {
        Cell::Num { value, decimals }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Cell::Num { value, .. } => Some(value),
            Cell::Int(v) => Some(v as f64),
            Cell::Text(_) => None,
        }
    }

    fn render(&self, format: Format) -> String {
        match (self, format) {
            (Cell::Text(s), _) => s.clone(),
            (Cell::Num { value, .. }, Format::Csv) => value.to_string(),
            (Cell::Num { value, decimals }, Format::Table) => format!("{value:.decimals$}"),
            (Cell::Int(v), _) => v.to_string(),
        }
    }

    fn is_numeric(&self) -> bool {
        !matches!(self, Cell::Text(_))
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Cell {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Cell {
        Cell::Text(s)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Report {
    pub fn new(header: &[&str]) -> Report {
        Report {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// First row whose text cells in `key_cols` equal `key`.
    pub fn find(&self, key: &[(&str, &str)]) -> Option<&[Cell]> {
        self.rows
            .iter()
            .find(|row| {
                key.iter().all(|(col, want)| {
                    self.column(col)
                        .is_some_and(|i| matches!(&row[i], Cell::Text(s) if s == want))
                })
            })
            .map(Vec::as_slice)
    }

    pub fn render(&self, format: Format) -> anyhow::Result<String> {
        match format {
            Format::Csv => self.to_csv(),
            Format::Table => Ok(self.to_table()),
        }
    }

    fn to_csv(&self) -> anyhow::Result<String> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        wtr.write_record(&self.header)?;
        for row in &self.rows {
            wtr.write_record(row.iter().map(|c| c.render(Format::Csv)))?;
        }
        Ok(String::from_utf8(wtr.into_inner()?)?)
    }

    /// Columns padded to their widest cell; numbers right-aligned.
    fn to_table(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(|c| c.render(Format::Table)).collect())
            .collect();
        let widths: Vec<usize> = (0..self.header.len())
            .map(|i| {
                cells
                    .iter()
                    .map(|r| r[i].chars().count())
                    .chain([self.header[i].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let numeric: Vec<bool> = (0..self.header.len())
            .map(|i| !self.rows.is_empty() && self.rows.iter().all(|r| r[i].is_numeric()))
            .collect();

        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let mut s = String::new();
            for (i, cell) in row.iter().enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                let w = widths[i];
                if numeric[i] {
                    let _ = write!(s, "{cell:>w$}");
                } else {
                    let _ = write!(s, "{cell:<w$}");
                }
            }
            out.push_str(s.trim_end());
            out.push('\n');
        };
        line(&mut out, &self.header);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&mut out, &rule);
        for row in &cells {
            line(&mut out, row);
        }
        out
    }
}
