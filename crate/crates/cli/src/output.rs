//! Tables, their CSV/JSON rendering, and the binary endpoint cache.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use thiserror::Error;

/// Artifact format version, written into every provenance header and cache.
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "csv" => Some(Format::Csv),
            "json" => Some(Format::Json),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
    Bool(bool),
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => fmt_f64(*v),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(v) => json!(v),
            Cell::Float(v) if v.is_finite() => json!(v),
            Cell::Float(_) => Value::Null,
            Cell::Text(s) => json!(s),
            Cell::Bool(b) => json!(b),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    /// Index of a column by name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// Who made an artifact and from what.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn header(&self) -> String {
        format!(
            "# refavg {} artifact-version={} command={} config-sha256={} seed={}",
            env!("CARGO_PKG_VERSION"),
            ARTIFACT_VERSION,
            self.command,
            self.config_hash,
            self.seed
        )
    }
}

pub fn render_csv(table: &Table, prov: &Provenance) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", prov.header());
    let _ = writeln!(out, "{}", table.columns.join(","));
    for row in &table.rows {
        let cells: Vec<String> = row.iter().map(Cell::csv).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn render_json(table: &Table, prov: &Provenance) -> String {
    let rows: Vec<Value> = table
        .rows
        .iter()
        .map(|row| {
            let mut obj = Map::new();
            for (name, cell) in table.columns.iter().zip(row) {
                obj.insert(name.clone(), cell.json());
            }
            Value::Object(obj)
        })
        .collect();
    let doc = json!({
        "provenance": {
            "tool": "refavg",
            "version": env!("CARGO_PKG_VERSION"),
            "artifact_version": ARTIFACT_VERSION,
            "command": prov.command,
            "config_sha256": prov.config_hash,
            "seed": prov.seed,
        },
        "columns": table.columns,
        "rows": rows,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("json values serialize");
    s.push('\n');
    s
}

pub fn render(table: &Table, prov: &Provenance, format: Format) -> String {
    match format {
        Format::Csv => render_csv(table, prov),
        Format::Json => render_json(table, prov),
    }
}

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cache {0}")]
    Cache(String),
}

pub fn ensure_dir(dir: &Path) -> Result<(), OutputError> {
    std::fs::create_dir_all(dir).map_err(|source| OutputError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), OutputError> {
    std::fs::write(path, bytes).map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `table` once per format as `<dir>/<stem>.<ext>` and returns the paths.
pub fn write_table(
    dir: &Path,
    stem: &str,
    table: &Table,
    prov: &Provenance,
    formats: &[Format],
) -> Result<Vec<PathBuf>, OutputError> {
    ensure_dir(dir)?;
    let mut paths = Vec::new();
    for &f in formats {
        let path = dir.join(format!("{stem}.{}", f.extension()));
        write_file(&path, render(table, prov, f).as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

pub const CACHE_MAGIC: [u8; 8] = *b"RFAVGBIN";

/// Endpoint cache: magic, format version (u32), SHA-256 of the config
/// (32 bytes), column count (u32), row count (u64), then the values
/// row-major as little-endian `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cache {
    pub config_hash: [u8; 32],
    pub columns: u32,
    pub values: Vec<f64>,
}

impl Cache {
    pub fn rows(&self) -> usize {
        if self.columns == 0 {
            0
        } else {
            self.values.len() / self.columns as usize
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(56 + 8 * self.values.len());
        out.extend_from_slice(&CACHE_MAGIC);
        out.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.columns.to_le_bytes());
        out.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, OutputError> {
        let bad = |m: &str| OutputError::Cache(m.to_string());
        if bytes.len() < 56 || bytes[..8] != CACHE_MAGIC {
            return Err(bad("has no valid header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != ARTIFACT_VERSION {
            return Err(OutputError::Cache(format!("version {version} is not supported")));
        }
        let config_hash: [u8; 32] = bytes[12..44].try_into().expect("32 bytes");
        let columns = u32::from_le_bytes(bytes[44..48].try_into().expect("4 bytes"));
        let rows = u64::from_le_bytes(bytes[48..56].try_into().expect("8 bytes")) as usize;
        let body = &bytes[56..];
        if body.len() != rows * columns as usize * 8 {
            return Err(bad("payload length does not match its header"));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            config_hash,
            columns,
            values,
        })
    }
}

/// Parses a 64-character hex digest.
pub fn digest_bytes(hex: &str) -> Option<[u8; 32]> {
    if hex.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}
