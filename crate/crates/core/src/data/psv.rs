//! Pipe-separated hourly patient files: one header row, one row per hour,
//! `NaN` for a missing measurement.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub columns: Vec<String>,
    /// `rows[hour][column]`; missing cells are NaN.
    pub rows: Vec<Vec<f64>>,
}

impl PatientRecord {
    pub fn new(id: impl Into<String>, columns: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("no data rows".into()));
        }
        if let Some((h, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != columns.len()) {
            return Err(Error::Data(format!(
                "hour {h} has {} values for {} columns",
                r.len(),
                columns.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            columns,
            rows,
        })
    }

    pub fn hours(&self) -> usize {
        self.rows.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

fn parse_cell(s: &str, line: usize) -> Result<f64> {
    let s = s.trim();
    if s == "NaN" {
        return Ok(f64::NAN);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            line,
            reason: format!("`{s}` is not a number"),
        }),
    }
}

pub fn parse_psv(id: &str, text: &str) -> Result<PatientRecord> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::Parse {
            line: 1,
            reason: "empty file".into(),
        });
    };
    let columns: Vec<String> = header.split('|').map(|c| c.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let cells: Vec<&str> = line.split('|').collect();
        if cells.len() != columns.len() {
            return Err(Error::Parse {
                line: i + 1,
                reason: format!("{} fields, header has {}", cells.len(), columns.len()),
            });
        }
        rows.push(
            cells
                .iter()
                .map(|c| parse_cell(c, i + 1))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 2,
            reason: "no data rows".into(),
        });
    }
    PatientRecord::new(id, columns, rows)
}

pub fn serialize_psv(record: &PatientRecord) -> String {
    let mut out = record.columns.join("|");
    out.push('\n');
    for row in &record.rows {
        let cells: Vec<String> = row
            .iter()
            .map(|v| if v.is_nan() { "NaN".to_string() } else { v.to_string() })
            .collect();
        out.push_str(&cells.join("|"));
        out.push('\n');
    }
    out
}
