use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::CliError;

/// A numeric CSV table destined for the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self::with_header(name, header.iter().map(|h| h.to_string()).collect())
    }

    pub fn with_header(name: &str, header: Vec<String>) -> Self {
        Self {
            name: name.to_string(),
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        self.rows.push(row);
    }

    /// Non-finite values are written as `inf`, `-inf` or `NaN`.
    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(&self.name);
        let err = |e: csv::Error| CliError::Output(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        w.write_record(&self.header).map_err(err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(err)?;
        }
        w.flush()
            .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("{}: {e}", dir.display())))
}

pub fn write_report(dir: &Path, report: &Value) -> Result<(), CliError> {
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| CliError::Output(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}
