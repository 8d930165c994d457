//! Per-split detection reports aggregated into a results table.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DetectionReport;
use crate::scoring::Scorer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Tnr95,
    Auroc,
}

impl Metric {
    fn pair(&self, r: &DetectionReport) -> Option<(f64, f64)> {
        match self {
            Metric::Tnr95 => Some((r.tnr95_coarse?, r.tnr95_fine?)),
            Metric::Auroc => Some((r.auroc_coarse?, r.auroc_fine?)),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Tnr95 => "TNR95",
            Metric::Auroc => "AUROC",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub scorer: Scorer,
    /// (coarse, fine) in percent, one entry per split column.
    pub cells: Vec<Option<(f64, f64)>>,
    /// Mean over splits of (row − baseline), coarse and fine, in points.
    pub avg_diff: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub dataset: String,
    pub metric: Metric,
    pub splits: Vec<u32>,
    pub rows: Vec<ReportRow>,
}

const BASELINE: (&str, Scorer) = ("standard", Scorer::Msp);

/// Rows follow first appearance in `reports`. The baseline is the standard
/// model scored by MSP.
pub fn aggregate_reports(reports: &[DetectionReport], metric: Metric) -> Result<ReportTable> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid_arg("no detection reports to aggregate"))?;
    let dataset = &first.environment.dataset_name;
    if let Some(other) = reports.iter().find(|r| &r.environment.dataset_name != dataset) {
        return Err(Error::invalid_arg(format!(
            "reports mix environments of {dataset:?} and {:?}",
            other.environment.dataset_name
        )));
    }
    let splits: Vec<u32> = reports
        .iter()
        .map(|r| r.environment.split_index)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut keys: Vec<(String, Scorer)> = Vec::new();
    for r in reports {
        let key = (r.method.clone(), r.scorer);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let lookup = |method: &str, scorer: Scorer, split: u32| -> Result<Option<(f64, f64)>> {
        let mut hits = reports
            .iter()
            .filter(|r| r.method == method && r.scorer == scorer && r.environment.split_index == split);
        let hit = hits.next();
        if hits.next().is_some() {
            return Err(Error::invalid_arg(format!(
                "more than one report for {method}/{scorer} on split {split}"
            )));
        }
        Ok(hit.and_then(|r| metric.pair(r)).map(|(c, f)| (100.0 * c, 100.0 * f)))
    };

    let mut rows = Vec::with_capacity(keys.len());
    for (method, scorer) in keys {
        let mut cells = Vec::with_capacity(splits.len());
        let mut diffs = Vec::new();
        for &split in &splits {
            let cell = lookup(&method, scorer, split)?;
            if let (Some(v), Some(b)) = (cell, lookup(BASELINE.0, BASELINE.1, split)?) {
                diffs.push((v.0 - b.0, v.1 - b.1));
            }
            cells.push(cell);
        }
        let avg_diff = (!diffs.is_empty()).then(|| {
            let n = diffs.len() as f64;
            (
                diffs.iter().map(|d| d.0).sum::<f64>() / n,
                diffs.iter().map(|d| d.1).sum::<f64>() / n,
            )
        });
        rows.push(ReportRow {
            method,
            scorer,
            cells,
            avg_diff,
        });
    }
    Ok(ReportTable {
        dataset: dataset.clone(),
        metric,
        splits,
        rows,
    })
}

impl ReportTable {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["Method".to_string()];
        h.extend(self.splits.iter().map(|s| format!("Split {s}")));
        h.push("Avg. diff.".into());
        h
    }

    /// Markdown table with `coarse / fine` cells.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("{} {} (coarse / fine)\n\n", self.dataset, self.metric.as_str());
        let header = self.header();
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
        for row in &self.rows {
            let label = if row.scorer == Scorer::Msp {
                row.method.clone()
            } else {
                format!("{}+{}", row.method, row.scorer)
            };
            let mut cells = vec![label];
            cells.extend(row.cells.iter().map(|c| match c {
                Some((c, f)) => format!("{c:.1} / {f:.1}"),
                None => "-".into(),
            }));
            cells.push(match row.avg_diff {
                Some((c, f)) => format!("{c:+.1} / {f:+.1}"),
                None => "-".into(),
            });
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        out
    }
}

/// Loads every detection report (JSON) found below the given paths, in
/// sorted path order. Other JSON files are skipped.
pub fn collect_reports(paths: &[PathBuf]) -> Result<Vec<DetectionReport>> {
    fn walk(path: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
        if meta.is_dir() {
            let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
            for entry in entries {
                walk(&entry.map_err(|e| Error::io(path, e))?.path(), files)?;
            }
        } else if path.extension().is_some_and(|e| e == "json") {
            files.push(path.to_path_buf());
        }
        Ok(())
    }
    let mut files = Vec::new();
    for p in paths {
        walk(p, &mut files)?;
    }
    files.sort();
    let mut reports = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        if let Ok(r) = DetectionReport::from_json(&text) {
            reports.push(r);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{EnvironmentRef, THRESHOLD_CONVENTION};

    fn report(method: &str, split: u32, coarse: f64, fine: f64) -> DetectionReport {
        DetectionReport {
            environment: EnvironmentRef {
                dataset_name: "toy".into(),
                split_index: split,
                seed: 0,
            },
            method: method.into(),
            scorer: Scorer::Msp,
            temperature: 1.0,
            tnr95_coarse: Some(coarse),
            tnr95_fine: Some(fine),
            auroc_coarse: Some(0.5),
            auroc_fine: Some(0.5),
            id_accuracy: Some(0.9),
            n_id: 1,
            n_fine: 1,
            n_coarse: 1,
            mean_confidence_id: None,
            mean_confidence_fine: None,
            mean_confidence_coarse: None,
            threshold_convention: THRESHOLD_CONVENTION.into(),
        }
    }

    #[test]
    fn single_split_avg_equals_diff() {
        let t = aggregate_reports(
            &[report("standard", 1, 0.5, 0.2), report("oe", 1, 0.6, 0.25)],
            Metric::Tnr95,
        )
        .unwrap();
        let (c, f) = t.rows[1].avg_diff.unwrap();
        assert!((c - 10.0).abs() < 1e-9 && (f - 5.0).abs() < 1e-9);
        assert_eq!(t.rows[0].avg_diff, Some((0.0, 0.0)));
    }

    #[test]
    fn three_split_mean_and_header() {
        let mut rs = Vec::new();
        for (s, d) in [(1, 0.01), (2, 0.02), (3, 0.03)] {
            rs.push(report("standard", s, 0.4, 0.3));
            rs.push(report("mixoe-cut", s, 0.4 + d, 0.3 + d));
        }
        let t = aggregate_reports(&rs, Metric::Tnr95).unwrap();
        assert_eq!(t.header(), ["Method", "Split 1", "Split 2", "Split 3", "Avg. diff."]);
        let (c, f) = t.rows[1].avg_diff.unwrap();
        assert!((c - 2.0).abs() < 1e-9 && (f - 2.0).abs() < 1e-9);
        assert!(t
            .to_markdown()
            .contains("| mixoe-cut | 41.0 / 31.0 | 42.0 / 32.0 | 43.0 / 33.0 | +2.0 / +2.0 |"));
    }

    #[test]
    fn heterogeneous_and_duplicate_reports_rejected() {
        let mut other = report("oe", 1, 0.1, 0.1);
        other.environment.dataset_name = "else".into();
        assert!(aggregate_reports(&[report("oe", 1, 0.1, 0.1), other], Metric::Auroc).is_err());
        assert!(aggregate_reports(&[report("oe", 1, 0.1, 0.1), report("oe", 1, 0.2, 0.1)], Metric::Auroc).is_err());
        assert!(aggregate_reports(&[], Metric::Auroc).is_err());
    }

    #[test]
    fn collects_only_reports() {
        let dir = tempfile::tempdir().unwrap();
        report("oe", 2, 0.1, 0.2).save_json(&dir.path().join("b.json")).unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        report("oe", 1, 0.1, 0.2)
            .save_json(&dir.path().join("sub/a.json"))
            .unwrap();
        fs::write(dir.path().join("manifest.json"), "{}").unwrap();
        let rs = collect_reports(&[dir.path().to_path_buf()]).unwrap();
        assert_eq!(rs.len(), 2);
        assert_eq!(rs[0].environment.split_index, 2);
    }
}
