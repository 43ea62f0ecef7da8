use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::pipeline::{RunManifest, METRICS_FILE};
use crate::error::{Error, Result};
use crate::metrics::{render_table, MetricsReport};

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub run_dir: PathBuf,
    /// `None` when the run has not finished its eval stage.
    pub report: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub positive_class: usize,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn incomplete(&self) -> impl Iterator<Item = &ComparisonRow> {
        self.rows.iter().filter(|r| r.report.is_none())
    }

    /// Table over the complete runs, followed by one line per incomplete run.
    pub fn render(&self) -> String {
        let complete: Vec<(String, &MetricsReport)> = self
            .rows
            .iter()
            .filter_map(|r| r.report.as_ref().map(|m| (r.method.clone(), m)))
            .collect();
        let mut out = render_table(&complete);
        for r in self.incomplete() {
            let _ = writeln!(out, "incomplete: {} ({})", r.method, r.run_dir.display());
        }
        out
    }
}

fn read_report(dir: &Path) -> Result<Option<MetricsReport>> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// One row per run directory, in the order given. All runs must score the
/// same positive class.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.is_empty() {
        return Err(Error::Compare("no run directories given".into()));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    let mut positive: Option<usize> = None;
    for dir in dirs {
        let manifest = RunManifest::load(dir)
            .map_err(|e| Error::Compare(format!("{} is not a run directory: {e}", dir.display())))?;
        let report = read_report(dir)?;
        let pos = report.as_ref().map_or(manifest.positive_class, |r| r.positive_class);
        match positive {
            Some(p) if p != pos => {
                return Err(Error::Compare(format!(
                    "{} scores positive class {pos}, earlier runs use {p}",
                    dir.display()
                )))
            }
            _ => positive = Some(pos),
        }
        rows.push(ComparisonRow {
            method: manifest.method,
            run_dir: dir.clone(),
            report,
        });
    }
    Ok(Comparison {
        positive_class: positive.expect("nonempty"),
        rows,
    })
}
