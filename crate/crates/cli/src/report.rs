//! CSV tables and the JSON run report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// A CSV table. Headers carry units as `name[unit]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Bool(bool),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(x) if x.is_nan() => "nan".into(),
            Cell::Num(x) if x.is_infinite() => if *x > 0.0 { "inf" } else { "-inf" }.into(),
            Cell::Num(x) => format!("{x:.15e}"),
            Cell::Int(i) => i.to_string(),
            Cell::Bool(b) => b.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl Table {
    pub fn new(file: &str, header: &[&str]) -> Self {
        Self { file: file.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(Cell::render).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GateResult {
    pub name: String,
    pub value: f64,
    pub expected: String,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq, Default)]
pub struct StageReport {
    pub stage: String,
    pub summary: serde_json::Map<String, serde_json::Value>,
    pub tables: Vec<String>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub stages: Vec<StageReport>,
    pub gates: Vec<GateResult>,
    pub pass: bool,
}

/// Output of one stage.
#[derive(Debug, Default)]
pub struct StageOutput {
    pub report: StageReport,
    pub tables: Vec<Table>,
    pub gates: Vec<GateResult>,
    pub text: Vec<(String, String)>,
}

impl StageOutput {
    pub fn new(stage: &str) -> Self {
        Self { report: StageReport { stage: stage.into(), ..Default::default() }, ..Default::default() }
    }

    pub fn set(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.report.summary.insert(key.into(), value.into());
    }

    pub fn table(&mut self, t: Table) {
        self.report.tables.push(t.file.clone());
        self.tables.push(t);
    }

    pub fn gate(&mut self, name: &str, value: f64, expected: impl Into<String>, pass: bool) {
        self.gates.push(GateResult { name: name.into(), value, expected: expected.into(), pass });
    }
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io { path: dir.display().to_string(), message: e.to_string() })?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::Io { path: path.display().to_string(), message: e.to_string() })?;
    Ok(path)
}
