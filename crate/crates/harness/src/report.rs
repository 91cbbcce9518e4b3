//! Experiment reports: CSV tables, a JSON summary of every pass/fail
//! comparison, and a manifest identifying the configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::HarnessError;

/// Version of the CSV column layouts and of the summary schema.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<I, S>(&mut self, row: I)
    where
        I: IntoIterator<Item = S>,
        S: ToString,
    {
        let row: Vec<String> = row.into_iter().map(|c| c.to_string()).collect();
        debug_assert_eq!(row.len(), self.header.len(), "table {}", self.name);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))
    }
}

/// How an observed value is compared with its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
    /// A boolean property; `observed` is 1 when it holds.
    #[serde(rename = "holds")]
    Holds,
}

/// One pass/fail comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: String,
    pub passed: bool,
    pub observed: f64,
    pub relation: Relation,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    pub fn at_most(criterion: &str, observed: f64, threshold: f64, detail: String) -> Self {
        Check {
            criterion: criterion.to_string(),
            passed: observed <= threshold,
            observed,
            relation: Relation::AtMost,
            threshold,
            detail,
        }
    }

    pub fn at_least(criterion: &str, observed: f64, threshold: f64, detail: String) -> Self {
        Check {
            criterion: criterion.to_string(),
            passed: observed >= threshold,
            observed,
            relation: Relation::AtLeast,
            threshold,
            detail,
        }
    }

    pub fn holds(criterion: &str, holds: bool, detail: String) -> Self {
        Check {
            criterion: criterion.to_string(),
            passed: holds,
            observed: if holds { 1.0 } else { 0.0 },
            relation: Relation::Holds,
            threshold: 1.0,
            detail,
        }
    }

    pub fn line(&self) -> String {
        let rel = match self.relation {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
            Relation::Holds => "holds",
        };
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        match self.relation {
            Relation::Holds => format!("{verdict} {}: {}", self.criterion, self.detail),
            _ => format!(
                "{verdict} {}: {:.6} {rel} {} ({})",
                self.criterion, self.observed, self.threshold, self.detail
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub kind: String,
    pub seed: u64,
    pub replicates: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
    /// Kind-specific numbers behind the checks.
    pub values: serde_json::Value,
    /// The thresholds block of the spec, echoed verbatim.
    pub thresholds: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    /// SHA-256 of the canonical JSON of the spec that was run.
    pub config_hash: String,
    pub kind: String,
    pub seed: u64,
    pub wall_seconds: f64,
    /// How process time relates to the time of the limit equations.
    pub clock: String,
    /// Averaging window for time-averaged quantities, if any.
    pub window: Option<String>,
}

pub fn config_hash(spec: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(spec.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tables: Vec<Table>,
    pub summary: Summary,
    pub manifest: Manifest,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.summary.passed
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Observed value of the named check.
    pub fn check(&self, criterion: &str) -> Option<&Check> {
        self.summary
            .checks
            .iter()
            .find(|c| c.criterion == criterion)
    }

    /// Writes `<name>.csv` for every table, `summary.json` and
    /// `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir)?;
        for t in &self.tables {
            fs::write(dir.join(format!("{}.csv", t.name)), t.to_csv()?)?;
        }
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&self.summary)?,
        )?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(())
    }
}
