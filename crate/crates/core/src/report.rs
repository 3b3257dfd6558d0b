//! Versioned JSON report of per-head classifications and bound checks.
//!
//! The document is a single object `{"schema_version": 1, "records": [...]}`.
//! Each record carries a `"type"` tag (`pattern`, `sweep` or `check`).
//! Optional fields are omitted when absent, never written as `null`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patterns::PatternReport;
use crate::theorems::{BoundCheck, SweepSummary};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Pattern(PatternReport),
    Sweep(SweepSummary),
    Check(BoundCheck),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub records: Vec<Record>,
}

impl Report {
    pub fn new(records: Vec<Record>) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            records,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Report = serde_json::from_str(text)?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported report schema version {}",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

/// Write `records` as one pretty-printed JSON document.
pub fn emit_report(records: Vec<Record>, path: impl AsRef<Path>) -> Result<()> {
    write_json(path, &Report::new(records).to_json()?)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Report> {
    Report::from_json(&std::fs::read_to_string(path)?)
}

pub(crate) fn write_json(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}
