//! Run reports and CSV series.
//!
//! Every command writes `report.json` (versioned schema, config echo,
//! summary statistics, wall clock) and `series.csv` (the flat per-step or
//! per-trial table). The CSV is the source of truth for downstream
//! analysis and is byte-deterministic for a fixed config and seed; the
//! JSON carries the wall clock and is not byte-stable.

use crate::config::ExperimentConfig;
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A rectangular numeric series with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Deterministic CSV: header then one row per line, floats in Rust's
    /// shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(',');
                }
                out.push_str(&format!("{v}"));
                first = false;
            }
            out.push('\n');
        }
        out
    }
}

/// Summary of one command invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Scalar summary statistics, key-sorted for stable serialization.
    pub summary: BTreeMap<String, f64>,
    pub series_columns: Vec<String>,
    pub notes: Vec<String>,
    pub wall_clock_ms: f64,
}

impl RunReport {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            command: command.to_string(),
            seed: config.seed,
            config: config.clone(),
            summary: BTreeMap::new(),
            series_columns: Vec::new(),
            notes: Vec::new(),
            wall_clock_ms: 0.0,
        }
    }

    pub fn put(&mut self, key: &str, value: f64) {
        self.summary.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.summary.get(key).copied()
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Everything one command produces.
#[derive(Debug)]
pub struct CommandOutput {
    pub report: RunReport,
    pub series: Series,
    pub plot_svg: Option<String>,
    /// Additional named artifacts (e.g. the compiled ratio table CSV).
    pub extra_files: Vec<(String, String)>,
}

impl CommandOutput {
    pub fn new(report: RunReport, series: Series) -> Self {
        Self {
            report,
            series,
            plot_svg: None,
            extra_files: Vec::new(),
        }
    }

    /// Writes report.json, series.csv, and optional artifacts into `dir`.
    pub fn write_to(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.report.series_columns = self.series.columns.clone();
        std::fs::write(dir.join("report.json"), self.report.to_json()?)?;
        std::fs::write(dir.join("series.csv"), self.series.to_csv())?;
        if let Some(svg) = &self.plot_svg {
            std::fs::write(dir.join("plot.svg"), svg)?;
        }
        for (name, content) in &self.extra_files {
            std::fs::write(dir.join(name), content)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout_is_deterministic() {
        let mut s = Series::new(&["step", "k"]);
        s.push(vec![0.0, 50.0]);
        s.push(vec![1.0, 49.75]);
        let csv = s.to_csv();
        assert_eq!(csv, "step,k\n0,50\n1,49.75\n");
        assert_eq!(csv, s.to_csv());
    }

    // The report must survive a serialization round trip losslessly.
    #[test]
    fn report_round_trips() {
        let cfg = ExperimentConfig::default();
        let mut r = RunReport::new("budget_dynamics", &cfg);
        r.put("final_k", 18.123456789012345);
        r.put("accuracy", 0.95);
        r.note("defaults");
        r.wall_clock_ms = 12.5;
        let json = r.to_json().unwrap();
        let back = RunReport::from_json(&json).unwrap();
        assert_eq!(back.schema_version, REPORT_SCHEMA_VERSION);
        assert_eq!(back.command, "budget_dynamics");
        assert_eq!(back.get("final_k"), Some(18.123456789012345));
        assert_eq!(back.config, cfg);
        assert_eq!(back.notes, vec!["defaults".to_string()]);
    }

    #[test]
    fn output_writes_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let mut out = CommandOutput::new(
            RunReport::new("x", &cfg),
            Series::new(&["a"]),
        );
        out.plot_svg = Some("<svg></svg>".to_string());
        out.extra_files.push(("lut.csv".to_string(), "t\n".to_string()));
        out.write_to(dir.path()).unwrap();
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("series.csv").exists());
        assert!(dir.path().join("plot.svg").exists());
        assert!(dir.path().join("lut.csv").exists());
    }
}
