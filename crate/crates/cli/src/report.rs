//! Merge the metric tables of several run directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::CliError;
use crate::output::{read_manifest, read_metrics, sha256_file, InputRecord, MetricRow, MANIFEST_FILE, METRICS_FILE};

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Rows of every run, in order. Identical cells from different runs are
/// kept once; conflicting cells get the run name appended to their row.
/// Every table must carry one test-partition hash across all runs.
pub fn merge(runs: &[(String, Vec<MetricRow>)]) -> Result<Vec<MetricRow>, CliError> {
    let mut hashes: BTreeMap<&str, (&str, &str)> = BTreeMap::new();
    for (name, rows) in runs {
        for r in rows.iter().filter(|r| !r.test_partition_hash.is_empty()) {
            match hashes.get(r.table.as_str()) {
                None => {
                    hashes.insert(&r.table, (name, &r.test_partition_hash));
                }
                Some((first, h)) if *h != r.test_partition_hash => {
                    return Err(CliError::PartitionMismatch {
                        table: r.table.clone(),
                        first: first.to_string(),
                        first_hash: h.to_string(),
                        second: name.clone(),
                        second_hash: r.test_partition_hash.clone(),
                    });
                }
                Some(_) => {}
            }
        }
    }
    let mut out: Vec<MetricRow> = Vec::new();
    for (name, rows) in runs {
        for r in rows {
            let clash = out.iter().find(|o| o.table == r.table && o.row == r.row && o.column == r.column && o.metric == r.metric);
            match clash {
                Some(o) if o == r => {}
                Some(_) => out.push(MetricRow { row: format!("{} [{name}]", r.row), ..r.clone() }),
                None => out.push(r.clone()),
            }
        }
    }
    Ok(out)
}

pub struct Loaded {
    pub rows: Vec<MetricRow>,
    pub inputs: BTreeMap<String, InputRecord>,
}

pub fn load_runs(dirs: &[PathBuf]) -> Result<Loaded, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    let mut runs = Vec::new();
    let mut inputs = BTreeMap::new();
    for d in dirs {
        read_manifest(d)?;
        let name = run_name(d);
        let sha = sha256_file(&d.join(MANIFEST_FILE))?;
        inputs.insert(name.clone(), InputRecord { path: Some(d.display().to_string()), sha256: Some(sha), records: 0 });
        runs.push((name, read_metrics(&d.join(METRICS_FILE))?));
    }
    Ok(Loaded { rows: merge(&runs)?, inputs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(table: &str, r: &str, c: &str, v: f64, hash: &str) -> MetricRow {
        MetricRow::scalar(table, r, c, "auc", v, 5, hash)
    }

    #[test]
    fn single_run_passes_through() {
        let rows = vec![row("leakage", "raw", "sex", 0.9, "h"), row("leakage", "tcn-hidden", "sex", 0.8, "h")];
        assert_eq!(merge(&[("a".into(), rows.clone())]).unwrap(), rows);
    }

    #[test]
    fn audits_merge_into_one_matrix() {
        let a = vec![row("leakage", "raw", "sex", 0.9, "h"), row("leakage", "lstm-hidden", "sex", 0.8, "h")];
        let b = vec![row("leakage", "raw", "sex", 0.9, "h"), row("leakage", "tcn-hidden", "sex", 0.7, "h")];
        let c = vec![row("leakage", "raw", "sex", 0.91, "h")];
        let m = merge(&[("a".into(), a), ("b".into(), b), ("c".into(), c)]).unwrap();
        let names: Vec<&str> = m.iter().map(|r| r.row.as_str()).collect();
        assert_eq!(names, ["raw", "lstm-hidden", "tcn-hidden", "raw [c]"]);
    }

    #[test]
    fn mismatched_partitions_are_refused() {
        let a = vec![row("leakage", "raw", "sex", 0.9, "h1")];
        let b = vec![row("leakage", "raw", "sex", 0.9, "h2")];
        let err = merge(&[("a".into(), a), ("b".into(), b)]).unwrap_err();
        assert!(matches!(err, CliError::PartitionMismatch { .. }), "{err}");
    }
}
