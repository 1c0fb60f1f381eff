//! Report documents and columnar tables written by the command line front end.
//!
//! A run directory holds `report.json`, `replicas.json` (the raw per-replica
//! records, for merging) and one `<experiment>_<quantity>.csv` per table.
//! Floats in tables are written with 17 significant digits.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, ExperimentKind, OutputFormat};
use crate::ensemble::{ReplicaPlan, ReplicaRecord};
use crate::error::{Error, Result};
use crate::experiments::Outcome;

pub const SCHEMA_VERSION: u32 = 1;

/// One table cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Float(f64),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Int(v as i64)
    }
}

impl Cell {
    pub fn as_f64(&self) -> f64 {
        match *self {
            Cell::Int(v) => v as f64,
            Cell::Float(v) => v,
        }
    }

    fn write(&self, out: &mut String) {
        match *self {
            Cell::Int(v) => write!(out, "{v}"),
            Cell::Float(v) => write!(out, "{v:.16e}"),
        }
        .expect("writing to a string");
    }
}

/// A named table with a header row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    /// Values of one column.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k].as_f64()).collect())
    }

    /// `<experiment>_<quantity>.csv`
    pub fn file_name(&self, kind: ExperimentKind) -> String {
        format!("{}_{}.csv", kind.name(), self.name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            for (k, c) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                c.write(&mut out);
            }
            out.push('\n');
        }
        out
    }
}

/// Run metadata that is allowed to differ between reproductions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub wall_clock_seconds: f64,
    pub workers: usize,
    pub crate_version: String,
}

/// Replica ids covered by a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSpan {
    pub count: usize,
    /// Half-open id ranges in ascending order.
    pub ranges: Vec<(u64, u64)>,
}

impl ReplicaSpan {
    pub fn from_records(records: &[ReplicaRecord]) -> Self {
        let mut ranges: Vec<(u64, u64)> = Vec::new();
        for r in records {
            match ranges.last_mut() {
                Some(last) if last.1 == r.replica_id => last.1 += 1,
                _ => ranges.push((r.replica_id, r.replica_id + 1)),
            }
        }
        ReplicaSpan {
            count: records.len(),
            ranges,
        }
    }
}

/// The structured result of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub replicas: ReplicaSpan,
    pub results: Outcome,
    /// File names of the columnar tables.
    pub table_files: Vec<String>,
    pub metadata: RunMetadata,
    #[serde(skip)]
    pub tables: Vec<Table>,
}

impl ExperimentReport {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

/// Raw per-replica records of one batch; the unit of merging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub plan: ReplicaPlan,
    pub records: Vec<ReplicaRecord>,
}

impl Batch {
    pub fn read(path: &Path) -> Result<Batch> {
        let text = std::fs::read_to_string(path)?;
        let b: Batch = serde_json::from_str(&text)?;
        if b.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "{} has schema version {}, expected {SCHEMA_VERSION}",
                path.display(),
                b.schema_version
            )));
        }
        Ok(b)
    }
}

pub const REPORT_FILE: &str = "report.json";
pub const REPLICAS_FILE: &str = "replicas.json";

/// Writes the report, the tables and (when present) the batch into `dir`.
/// Returns the paths written.
pub fn write_outputs(dir: &Path, report: &ExperimentReport, batch: Option<&Batch>, formats: &[OutputFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if formats.contains(&OutputFormat::Json) {
        let p = dir.join(REPORT_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(report)? + "\n")?;
        written.push(p);
        if let Some(b) = batch {
            let p = dir.join(REPLICAS_FILE);
            std::fs::write(&p, serde_json::to_string(b)? + "\n")?;
            written.push(p);
        }
    }
    if formats.contains(&OutputFormat::Csv) {
        for t in &report.tables {
            let p = dir.join(t.file_name(report.kind));
            std::fs::write(&p, t.to_csv())?;
            written.push(p);
        }
    }
    Ok(written)
}
