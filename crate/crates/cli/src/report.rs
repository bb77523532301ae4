//! Reading a finished run directory back.

use std::fs;
use std::path::Path;

use crate::artifacts::{REQUIRED_FILES, SUMMARY_FILE};
use crate::error::CliError;

/// Parsed `summary.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub title: String,
    pub checks: Vec<(String, bool, String)>,
    pub metrics: Vec<(String, String)>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.1)
    }
}

pub fn missing_files(dir: &Path) -> Vec<&'static str> {
    REQUIRED_FILES.iter().copied().filter(|f| !dir.join(f).is_file()).collect()
}

pub fn parse_summary(text: &str) -> RunReport {
    let mut report = RunReport {
        title: String::new(),
        checks: Vec::new(),
        metrics: Vec::new(),
    };
    for line in text.lines() {
        if let Some(t) = line.strip_prefix("# ") {
            report.title = t.to_string();
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, '\t').collect();
        match parts.as_slice() {
            ["PASS", c, d] => report.checks.push((c.to_string(), true, d.to_string())),
            ["FAIL", c, d] => report.checks.push((c.to_string(), false, d.to_string())),
            ["metric", k, v] => report.metrics.push((k.to_string(), v.to_string())),
            _ => {}
        }
    }
    report
}

/// Loads a run directory, naming every expected artifact that is absent.
pub fn load(dir: &Path) -> Result<RunReport, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a run directory", dir.display())));
    }
    let missing = missing_files(dir);
    if !missing.is_empty() {
        return Err(CliError::Artifact(format!(
            "{} is incomplete: missing {} (a run directory holds {})",
            dir.display(),
            missing.join(", "),
            REQUIRED_FILES.join(", ")
        )));
    }
    Ok(parse_summary(&fs::read_to_string(dir.join(SUMMARY_FILE))?))
}

pub fn render(report: &RunReport) -> String {
    let mut s = format!("{}\n", report.title);
    for (c, ok, d) in &report.checks {
        s.push_str(&format!("  {} {c}: {d}\n", if *ok { "PASS" } else { "FAIL" }));
    }
    for (k, v) in &report.metrics {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}
