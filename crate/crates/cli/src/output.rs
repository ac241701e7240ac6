//! CSV and JSON-lines emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    Bool(bool),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(v) => format_number(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(v) if v.is_finite() => json!(v),
            Cell::Num(v) => json!(format_number(*v)),
            Cell::Int(v) => json!(v),
            Cell::Text(s) => json!(s),
            Cell::Bool(b) => json!(b),
        }
    }
}

/// 17 significant digits, enough to recover the `f64` exactly.
pub fn format_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// Joins the coordinates of a displacement with `;`.
pub fn format_offset(offset: &[i64]) -> String {
    offset.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_columns(name: &str, columns: Vec<String>) -> Self {
        Table {
            name: name.to_string(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// Tags written into every output file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTag {
    pub master_seed: u64,
    pub config_hash: String,
}

pub fn render_csv(table: &Table, tag: &RunTag) -> String {
    let mut out = table.columns.join(",");
    out.push('\n');
    for row in &table.rows {
        let cells: Vec<String> = row.iter().map(Cell::csv).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let _ = writeln!(out, "# master_seed={} config_hash={}", tag.master_seed, tag.config_hash);
    out
}

/// First line is a meta record, then one object per row.
pub fn render_jsonl(table: &Table, tag: &RunTag) -> String {
    let meta = json!({
        "file": format!("{}.csv", table.name),
        "master_seed": tag.master_seed,
        "config_hash": tag.config_hash,
        "columns": table.columns,
    });
    let mut out = meta.to_string();
    out.push('\n');
    for row in &table.rows {
        let obj: Map<String, Value> = table.columns.iter().cloned().zip(row.iter().map(Cell::json)).collect();
        out.push_str(&Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Writes `<name>.csv` and `<name>.jsonl`; returns the paths written.
pub fn emit(dir: &Path, table: &Table, tag: &RunTag) -> Result<Vec<PathBuf>, CliError> {
    let csv = dir.join(format!("{}.csv", table.name));
    let jsonl = dir.join(format!("{}.jsonl", table.name));
    write_file(&csv, &render_csv(table, tag))?;
    write_file(&jsonl, &render_jsonl(table, tag))?;
    Ok(vec![csv, jsonl])
}
