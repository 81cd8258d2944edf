//! Comma-separated text tables with a header row. Lines starting with `#`
//! are comments; fields are trimmed.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DelimitedTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl DelimitedTable {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(false)
            .from_reader(text.as_bytes());
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| Error::parse(source, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if headers.is_empty() || headers.iter().all(String::is_empty) {
            return Err(Error::parse(source, "missing header row"));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::parse(source, e.to_string()))?;
            rows.push(record.iter().map(str::to_string).collect());
        }
        Ok(Self { headers, rows })
    }

    pub fn column(&self, name: &str, source: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(source, format!("missing column `{name}`")))
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn source_name(path: &Path) -> String {
    path.display().to_string()
}

pub fn parse_f64(field: &str, source: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(source, format!("row {line}: `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(source, format!("row {line}: non-finite value `{field}`")));
    }
    Ok(v)
}

/// Parses a "lo,hi" range.
pub fn parse_range(text: &str) -> Result<(f64, f64)> {
    let (lo, hi) = text
        .split_once(',')
        .ok_or_else(|| Error::parse("range", format!("`{text}` is not `lo,hi`")))?;
    let lo = parse_f64(lo.trim(), "range", 0)?;
    let hi = parse_f64(hi.trim(), "range", 0)?;
    if lo >= hi {
        return Err(Error::validation("range", format!("lower bound {lo} must be below {hi}")));
    }
    Ok((lo, hi))
}

/// One id per line; blank and `#` lines skipped; duplicates rejected.
pub fn parse_id_list(text: &str, source: &str) -> Result<Vec<String>> {
    let mut seen = std::collections::HashSet::new();
    let mut ids = Vec::new();
    for line in text.lines() {
        let id = line.trim();
        if id.is_empty() || id.starts_with('#') {
            continue;
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::parse(source, format!("duplicate id `{id}`")));
        }
        ids.push(id.to_string());
    }
    Ok(ids)
}

/// Per-user scalar values from a `user_id` column and the named value
/// column. `NA` or an empty field marks an undefined value.
pub fn parse_user_values(
    text: &str,
    source: &str,
    column: &str,
) -> Result<Vec<(String, Option<f64>)>> {
    let table = DelimitedTable::parse(text, source)?;
    let uc = table.column("user_id", source)?;
    let vc = table.column(column, source)?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(table.rows.len());
    for (i, row) in table.rows.iter().enumerate() {
        let user = row[uc].clone();
        if !seen.insert(user.clone()) {
            return Err(Error::parse(source, format!("duplicate user `{user}`")));
        }
        let value = match row[vc].as_str() {
            "" | "NA" => None,
            s => Some(parse_f64(s, source, i + 1)?),
        };
        out.push((user, value));
    }
    Ok(out)
}
