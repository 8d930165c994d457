//! Detection and classification metrics. ID examples are the positive class.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{Origin, ScoreTable, Scorer};
use crate::splits::EnvironmentSpec;

/// Threshold and tie conventions, recorded in every report.
pub const THRESHOLD_CONVENTION: &str = "tnr@tpr: threshold is the largest observed ID score \
with fraction(ID >= t) >= target; ID scores >= t are accepted, OOD scores < t are rejected; \
auroc: Mann-Whitney with ties counted 1/2";

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid_arg(format!("{name} scores are empty")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput(format!("{name} scores contain NaN")));
    }
    Ok(())
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Probability that a random ID score exceeds a random OOD score, ties ½.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let ood = sorted(ood_scores);
    // Twice the Mann-Whitney U statistic, kept integral until the end.
    let twice_u: u64 = id_scores
        .iter()
        .map(|&s| {
            let below = ood.partition_point(|&o| o < s) as u64;
            let not_above = ood.partition_point(|&o| o <= s) as u64;
            2 * below + (not_above - below)
        })
        .sum();
    let pairs = (id_scores.len() * ood_scores.len()) as f64;
    Ok(twice_u as f64 / (2.0 * pairs))
}

/// Largest observed ID score `t` such that at least `tpr_target` of ID
/// scores are `>= t`.
pub fn tpr_threshold(id_scores: &[f64], tpr_target: f64) -> Result<f64> {
    check_scores("ID", id_scores)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::invalid_arg(format!(
            "target TPR must lie in (0, 1], got {tpr_target}"
        )));
    }
    let id = sorted(id_scores);
    let n = id.len() as f64;
    // Fraction accepted only shrinks as the threshold rises, so walk the
    // distinct values from the top.
    let mut idx = id.len();
    while idx > 0 {
        let candidate = id[idx - 1];
        let first = id.partition_point(|&s| s < candidate);
        if (id.len() - first) as f64 / n >= tpr_target {
            return Ok(candidate);
        }
        idx = first;
    }
    Ok(id[0])
}

/// Fraction of OOD scores strictly below the threshold that accepts
/// `tpr_target` of ID scores.
pub fn tnr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<f64> {
    check_scores("OOD", ood_scores)?;
    let threshold = tpr_threshold(id_scores, tpr_target)?;
    let rejected = ood_scores.iter().filter(|&&s| s < threshold).count();
    Ok(rejected as f64 / ood_scores.len() as f64)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid_arg(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid_arg("accuracy of an empty set"));
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Identifies the environment a report belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentRef {
    pub dataset_name: String,
    pub split_index: u32,
    pub seed: u64,
}

impl From<&EnvironmentSpec> for EnvironmentRef {
    fn from(spec: &EnvironmentSpec) -> Self {
        Self {
            dataset_name: spec.dataset_name.clone(),
            split_index: spec.split_index,
            seed: spec.seed,
        }
    }
}

/// Metrics of one (environment, method, scorer) combination. Metrics whose
/// inputs were missing are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub environment: EnvironmentRef,
    /// Training method that produced the model, e.g. `standard` or `mixoe-cut`.
    pub method: String,
    pub scorer: Scorer,
    pub temperature: f64,
    pub tnr95_coarse: Option<f64>,
    pub tnr95_fine: Option<f64>,
    pub auroc_coarse: Option<f64>,
    pub auroc_fine: Option<f64>,
    pub id_accuracy: Option<f64>,
    pub n_id: usize,
    pub n_fine: usize,
    pub n_coarse: usize,
    /// Mean maximum softmax probability per origin.
    pub mean_confidence_id: Option<f64>,
    pub mean_confidence_fine: Option<f64>,
    pub mean_confidence_coarse: Option<f64>,
    pub threshold_convention: String,
}

const CSV_HEADER: [&str; 14] = [
    "dataset",
    "split_index",
    "seed",
    "method",
    "scorer",
    "temperature",
    "tnr95_coarse",
    "tnr95_fine",
    "auroc_coarse",
    "auroc_fine",
    "id_accuracy",
    "n_id",
    "n_fine",
    "n_coarse",
];

impl DetectionReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("detection report", e))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.environment.dataset_name.clone(),
            self.environment.split_index.to_string(),
            self.environment.seed.to_string(),
            self.method.clone(),
            self.scorer.to_string(),
            self.temperature.to_string(),
            opt(self.tnr95_coarse),
            opt(self.tnr95_fine),
            opt(self.auroc_coarse),
            opt(self.auroc_fine),
            opt(self.id_accuracy),
            self.n_id.to_string(),
            self.n_fine.to_string(),
            self.n_coarse.to_string(),
        ]
    }

    /// Header plus one row per report.
    pub fn to_csv(reports: &[DetectionReport]) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(CSV_HEADER).expect("in-memory write");
        for r in reports {
            writer.write_record(r.csv_fields()).expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// Computes every metric the table supports. Detection metrics need ID
/// scores plus the respective OOD origin; accuracy needs predictions.
pub fn build_report(
    table: &ScoreTable,
    predictions: &[usize],
    labels: &[usize],
    env: &EnvironmentSpec,
    method: &str,
) -> Result<DetectionReport> {
    let id = table.scores_for(Origin::IdTest);
    let fine = table.scores_for(Origin::FineOod);
    let coarse = table.scores_for(Origin::CoarseOod);
    let pair = |ood: &[f64]| -> Result<(Option<f64>, Option<f64>)> {
        if id.is_empty() || ood.is_empty() {
            return Ok((None, None));
        }
        Ok((Some(tnr_at_tpr(&id, ood, 0.95)?), Some(auroc(&id, ood)?)))
    };
    let (tnr95_fine, auroc_fine) = pair(&fine)?;
    let (tnr95_coarse, auroc_coarse) = pair(&coarse)?;
    let id_accuracy = if labels.is_empty() && predictions.is_empty() {
        None
    } else {
        Some(accuracy(predictions, labels)?)
    };
    Ok(DetectionReport {
        environment: env.into(),
        method: method.to_string(),
        scorer: table.scorer,
        temperature: table.temperature,
        tnr95_coarse,
        tnr95_fine,
        auroc_coarse,
        auroc_fine,
        id_accuracy,
        n_id: id.len(),
        n_fine: fine.len(),
        n_coarse: coarse.len(),
        mean_confidence_id: None,
        mean_confidence_fine: None,
        mean_confidence_coarse: None,
        threshold_convention: THRESHOLD_CONVENTION.to_string(),
    })
}
