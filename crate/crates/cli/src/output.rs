//! Run artifacts: long-format metrics, aligned text tables and the manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tsleak::training::MetricReport;

use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const ERROR_FILE: &str = "error.json";

/// One cell of a result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub table: String,
    pub row: String,
    pub column: String,
    pub metric: String,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub n_boot: usize,
    pub seed: u64,
    pub test_partition_hash: String,
}

impl MetricRow {
    pub fn from_report(table: &str, row: &str, column: &str, r: &MetricReport, hash: &str) -> Self {
        Self {
            table: table.into(),
            row: row.into(),
            column: column.into(),
            metric: r.metric_name.clone(),
            point: r.point,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            n: r.n,
            n_boot: r.n_boot,
            seed: r.seed,
            test_partition_hash: hash.into(),
        }
    }

    /// A value without an interval.
    pub fn scalar(table: &str, row: &str, column: &str, metric: &str, value: f64, n: usize, hash: &str) -> Self {
        Self {
            table: table.into(),
            row: row.into(),
            column: column.into(),
            metric: metric.into(),
            point: value,
            ci_low: value,
            ci_high: value,
            n,
            n_boot: 0,
            seed: 0,
            test_partition_hash: hash.into(),
        }
    }

    fn cell(&self) -> String {
        if self.n_boot == 0 {
            format!("{:.4}", self.point)
        } else {
            format!("{:.3} ({:.3}, {:.3})", self.point, self.ci_low, self.ci_high)
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))).collect()
}

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// One aligned matrix per table: rows x columns, cells `point (lo, hi)`.
pub fn render_tables(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    for table in first_seen(rows.iter().map(|r| r.table.as_str())) {
        let cells: Vec<&MetricRow> = rows.iter().filter(|r| r.table == table).collect();
        let row_keys = first_seen(cells.iter().map(|r| r.row.as_str()));
        let col_keys = first_seen(cells.iter().map(|r| r.column.as_str()));
        let metrics = first_seen(cells.iter().map(|r| r.metric.as_str()));
        let hashes = first_seen(cells.iter().map(|r| r.test_partition_hash.as_str()));
        let _ = writeln!(out, "== {table} [{}] ==", metrics.join(", "));
        for h in hashes.iter().filter(|h| !h.is_empty()) {
            let _ = writeln!(out, "test partition {h}");
        }
        let grid: Vec<Vec<String>> = row_keys
            .iter()
            .map(|rk| {
                col_keys
                    .iter()
                    .map(|ck| {
                        cells.iter().find(|c| c.row == *rk && c.column == *ck).map_or_else(|| "-".into(), |c| c.cell())
                    })
                    .collect()
            })
            .collect();
        let w0 = row_keys.iter().map(|r| r.len()).max().unwrap_or(0).max(table.len());
        let widths: Vec<usize> = col_keys
            .iter()
            .enumerate()
            .map(|(j, c)| grid.iter().map(|g| g[j].len()).max().unwrap_or(0).max(c.len()))
            .collect();
        let _ = write!(out, "{:<w0$}", "");
        for (c, w) in col_keys.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for (rk, g) in row_keys.iter().zip(&grid) {
            let _ = write!(out, "{rk:<w0$}");
            for (cell, w) in g.iter().zip(&widths) {
                let _ = write!(out, "  {cell:>w$}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: Option<String>,
    pub sha256: Option<String>,
    pub records: usize,
}

/// Everything needed to regenerate a run: the resolved config, the seed,
/// input hashes, and digests of what was written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub experiment: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, InputRecord>,
    pub test_partition_hash: Option<String>,
    /// Relative artifact path -> sha256.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default)]
    pub children: Vec<String>,
}

/// Collects artifacts of one run directory.
pub struct RunDir {
    pub root: PathBuf,
    artifacts: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
        let stale = root.join(ERROR_FILE);
        if stale.exists() {
            fs::remove_file(stale)?;
        }
        Ok(Self { root: root.to_path_buf(), artifacts: Vec::new() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Record a file written under the run directory.
    pub fn track(&mut self, rel: &str) {
        if !self.artifacts.iter().any(|a| a == rel) {
            self.artifacts.push(rel.to_string());
        }
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<(), CliError> {
        fs::write(self.path(rel), text)?;
        self.track(rel);
        Ok(())
    }

    pub fn write_metrics(&mut self, rows: &[MetricRow]) -> Result<(), CliError> {
        write_metrics(&self.path(METRICS_FILE), rows)?;
        self.track(METRICS_FILE);
        self.write_text(REPORT_FILE, &render_tables(rows))
    }

    pub fn finish(self, mut manifest: Manifest) -> Result<Manifest, CliError> {
        for rel in &self.artifacts {
            manifest.artifacts.insert(rel.clone(), sha256_file(&self.root.join(rel))?);
        }
        fs::write(self.root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(table: &str, r: &str, c: &str, v: f64, boot: usize) -> MetricRow {
        MetricRow { n_boot: boot, ..MetricRow::scalar(table, r, c, "auc", v, 10, "h") }
    }

    #[test]
    fn tables_pivot_rows_and_columns() {
        let rows = vec![row("t", "raw", "sex", 0.9, 100), row("t", "raw", "age", 0.8, 0), row("t", "tcn", "sex", 0.7, 0)];
        let text = render_tables(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "== t [auc] ==");
        assert!(lines[2].contains("sex") && lines[2].contains("age"));
        assert!(lines[3].starts_with("raw") && lines[3].contains("0.900 (0.900, 0.900)") && lines[3].contains("0.8000"));
        assert!(lines[4].starts_with("tcn") && lines[4].trim_end().ends_with('-'));
    }

    #[test]
    fn metrics_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![row("a,b", "x", "y", 0.123456789, 5), row("c", "x\"q", "z", f64::MIN_POSITIVE, 0)];
        write_metrics(&p, &rows).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }
}
