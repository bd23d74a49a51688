//! Experiment reports and their JSON / CSV renderings.

use std::io::Write;

use anyhow::Result;
use serde::{Serialize, Serializer};
use serde_json::Value;

use crate::config::RunConfig;
use crate::prompt::escape_prompt;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Fixed-column rows written by `--format csv`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// What an experiment hands back before it is wrapped into a [`Report`].
#[derive(Debug, Clone)]
pub struct Outcome {
    pub results: Value,
    pub table: Table,
    pub verdicts: Vec<Verdict>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub experiment: String,
    pub version: &'static str,
    pub config: RunConfig,
    /// SHA-256 of the weight file, when weights were loaded from one.
    pub weights_sha256: Option<String>,
    pub results: Value,
    pub verdicts: Vec<Verdict>,
    pub passed: bool,
    pub timestamp: String,
    #[serde(skip)]
    pub table: Table,
}

impl Report {
    pub fn new(config: RunConfig, weights_sha256: Option<String>, outcome: Outcome) -> Self {
        let passed = outcome.verdicts.iter().all(|v| v.passed);
        Self {
            experiment: config.experiment.name().to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config,
            weights_sha256,
            results: outcome.results,
            verdicts: outcome.verdicts,
            passed,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            table: outcome.table,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.table.columns)?;
        for row in &self.table.rows {
            out.write_record(row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// One line per verdict, for the terminal.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for v in &self.verdicts {
            s.push_str(&format!(
                "{} {}: {}\n",
                if v.passed { "PASS" } else { "FAIL" },
                v.name,
                v.detail
            ));
        }
        s.push_str(&format!(
            "{} {}\n",
            self.experiment,
            if self.passed { "passed" } else { "FAILED" }
        ));
        s
    }
}

pub fn serialize_prompts<S: Serializer>(prompts: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(prompts.iter().map(|p| escape_prompt(p)))
}

/// Formats a float so that it round-trips and renders identically across runs.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}
