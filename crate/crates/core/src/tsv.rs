//! Tab-separated tables with a header row, the format of every emitted table.

use std::path::Path;

use crate::error::{Error, Result};

pub fn write(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table, returning the header and the raw rows.
pub fn read(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

/// Column index of `name`, or a parse error naming the file.
pub fn column(path: &Path, header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::parse(path, format!("missing column {name:?}")))
}

pub fn field<T: std::str::FromStr>(path: &Path, row: &[String], idx: usize, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = row
        .get(idx)
        .ok_or_else(|| Error::parse(path, format!("row {line}: missing field {idx}")))?;
    raw.trim()
        .parse()
        .map_err(|e| Error::parse(path, format!("row {line}: bad value {raw:?}: {e}")))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::parse(path, format!("{other:?}")),
    }
}
