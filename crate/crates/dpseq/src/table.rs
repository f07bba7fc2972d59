//! Metric tables written as CSV.
//!
//! Floats use the shortest representation that parses back to the same
//! value (`inf` for an unbounded budget), so tables are reproducible byte for
//! byte and lossless.

use std::path::Path;

use crate::error::{Error, Result};

/// Shortest round-trip rendering of a float.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        w.write_record(&self.header)
            .map_err(|e| Error::format(path, e))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
        let header = r
            .headers()
            .map_err(|e| Error::format(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .map(|rec| {
                rec.map(|rec| rec.iter().map(str::to_string).collect())
                    .map_err(|e| Error::format(path, e))
            })
            .collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, path: &Path, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(path, format!("missing column `{name}`")))
    }
}

pub fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|e| Error::format(path, format!("`{s}`: {e}")))
}
