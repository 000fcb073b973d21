//! Evaluation metrics: ANLS over predicted/gold answer strings, region
//! accuracy of selections against ground truth, and the aggregate report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::GtAnnotation;
use crate::select::SelectionResult;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("got {selections} selections but {gts} ground-truth annotations")]
    LengthMismatch { selections: usize, gts: usize },
    #[error("empty gold answer list")]
    NoGolds,
}

pub const ANLS_THRESHOLD: f64 = 0.5;

/// Character-level Levenshtein distance, two-row dynamic program.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized Levenshtein score for one prediction against one gold:
/// 1 − NL when NL < threshold, else 0, case-insensitive.
pub fn anls_pair(pred: &str, gold: &str, threshold: f64) -> f64 {
    let p = pred.to_lowercase();
    let g = gold.to_lowercase();
    let max_len = p.chars().count().max(g.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    let nl = levenshtein(&p, &g) as f64 / max_len as f64;
    if nl < threshold {
        1.0 - nl
    } else {
        0.0
    }
}

/// Best score over the gold answers.
pub fn anls(pred: &str, golds: &[String], threshold: f64) -> Result<f64, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::NoGolds);
    }
    Ok(golds
        .iter()
        .map(|g| anls_pair(pred, g, threshold))
        .fold(0.0, f64::max))
}

/// Dataset ANLS: mean of per-question scores.
pub fn anls_dataset(pairs: &[(String, Vec<String>)], threshold: f64) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (pred, golds) in pairs {
        total += anls(pred, golds, threshold)?;
    }
    Ok(total / pairs.len() as f64)
}

/// How a selection counts as localizing the ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionAccuracyMode {
    /// Hull contains the center of the encompass box.
    #[default]
    CenterContainment,
    /// IoU between hull and encompass is at least 0.5.
    IouHalf,
}

pub fn region_accuracy(
    selections: &[SelectionResult],
    gts: &[GtAnnotation],
    mode: RegionAccuracyMode,
) -> Result<f64, MetricsError> {
    if selections.len() != gts.len() {
        return Err(MetricsError::LengthMismatch {
            selections: selections.len(),
            gts: gts.len(),
        });
    }
    if selections.is_empty() {
        return Ok(0.0);
    }
    let hits = selections
        .iter()
        .zip(gts)
        .filter(|(sel, gt)| match mode {
            RegionAccuracyMode::CenterContainment => {
                let (cx, cy) = gt.encompass.center();
                sel.hull.contains_point(cx, cy)
            }
            RegionAccuracyMode::IouHalf => sel.hull.iou(&gt.encompass) >= 0.5,
        })
        .count();
    Ok(hits as f64 / selections.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub anls: f64,
    pub region_accuracy: f64,
    pub mean_coverage: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row mirroring the ANLS / Acc. / Cov. column set.
    pub fn summary_line(&self) -> String {
        format!(
            "ANLS {:.4} | Region Acc. {:.1}% | Cov. {:.1}% | n={}",
            self.anls,
            self.region_accuracy * 100.0,
            self.mean_coverage * 100.0,
            self.n_samples
        )
    }

    pub fn to_csv(&self) -> String {
        format!(
            "anls,region_accuracy,mean_coverage,n_samples\n{},{},{},{}\n",
            self.anls, self.region_accuracy, self.mean_coverage, self.n_samples
        )
    }
}
