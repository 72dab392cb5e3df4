//! Experiment reports and their on-disk artifacts.
//!
//! A run directory holds `report.json` (UTF-8, sorted keys, no timing data)
//! and one CSV per table (header row, comma-delimited, LF line endings,
//! numbers rounded to 12 significant digits). Identical configs therefore
//! produce byte-identical directories.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    /// Holds, but with a caveat recorded in the detail (heuristic search,
    /// vacuous bound, ...).
    Flagged,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Flagged => "FLAG",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub verdict: Verdict,
    pub measured: f64,
    /// Human-readable acceptance condition, e.g. `<= 1e-12`.
    pub tolerance: String,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, ok: bool, measured: f64, tolerance: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
            measured,
            tolerance: tolerance.into(),
            detail: String::new(),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    /// Downgrades a pass to a flag.
    pub fn flag_if(mut self, caveat: bool, why: &str) -> Self {
        if caveat && self.verdict == Verdict::Pass {
            self.verdict = Verdict::Flagged;
            if !self.detail.is_empty() {
                self.detail.push_str("; ");
            }
            self.detail.push_str(why);
        }
        self
    }

    pub fn failed(&self) -> bool {
        self.verdict == Verdict::Fail
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: measured {} (want {})", self.verdict, self.name, format_number(self.measured), self.tolerance)?;
        if !self.detail.is_empty() {
            write!(f, " [{}]", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Bool(bool),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
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

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => format_number(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Bool(v) => v.to_string(),
            Cell::Text(v) => v.clone(),
        }
    }
}

/// Rounds to 12 significant digits and prints the shortest representation
/// of the rounded value.
pub fn format_number(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{v:.11e}").parse().expect("formatted float parses");
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    format!("{rounded:?}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width of table {}", self.name);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        Ok(w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?)
    }
}

/// What an experiment returns before artifacts are written.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub tables: Vec<Table>,
    pub data: serde_json::Map<String, serde_json::Value>,
}

impl Outcome {
    pub fn check(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn data(&mut self, key: &str, value: impl Serialize) {
        self.data.insert(key.into(), serde_json::to_value(value).expect("report data serializes"));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    /// What the experiment exercises.
    pub anchor: String,
    pub config: ExperimentConfig,
    pub checks: Vec<Check>,
    pub artifacts: Vec<String>,
    pub data: serde_json::Value,
    pub passed: bool,
}

impl ExperimentReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.failed())
    }
}

/// Writes the report and tables into `dir` and returns the report.
pub fn write_run(dir: &Path, experiment: &str, anchor: &str, config: &ExperimentConfig, outcome: Outcome) -> Result<ExperimentReport> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut artifacts = Vec::new();
    for table in &outcome.tables {
        let name = format!("{}.csv", table.name);
        write_file(&dir.join(&name), &table.to_csv()?)?;
        artifacts.push(name);
    }
    artifacts.push("report.json".into());
    artifacts.sort();
    let passed = !outcome.checks.iter().any(Check::failed);
    let report = ExperimentReport {
        experiment: experiment.into(),
        anchor: anchor.into(),
        config: config.clone(),
        checks: outcome.checks,
        artifacts,
        data: serde_json::Value::Object(outcome.data),
        passed,
    };
    // Round-tripping through `Value` sorts every object's keys.
    let value = serde_json::to_value(&report)?;
    let mut json = serde_json::to_string_pretty(&value)?;
    json.push('\n');
    write_file(&dir.join("report.json"), json.as_bytes())?;
    Ok(report)
}

fn write_file(path: &PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
