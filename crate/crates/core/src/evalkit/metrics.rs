//! Classification metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("labels contain a single class ({positives} positives, {negatives} negatives); metric undefined")]
    SingleClass { positives: usize, negatives: usize },
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("prediction file: {0}")]
    Parse(String),
}

fn class_counts(labels: &[bool]) -> Result<(usize, usize), MetricError> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }
    Ok((positives, negatives))
}

fn check_len(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::LengthMismatch { a, b });
    }
    Ok(())
}

/// `(sensitivity + specificity) / 2`.
pub fn balanced_accuracy(predictions: &[bool], labels: &[bool]) -> Result<f64, MetricError> {
    check_len(predictions.len(), labels.len())?;
    let (p, n) = class_counts(labels)?;
    let tp = predictions.iter().zip(labels).filter(|(&y, &t)| y && t).count();
    let tn = predictions.iter().zip(labels).filter(|(&y, &t)| !y && !t).count();
    Ok((tp as f64 / p as f64 + tn as f64 / n as f64) / 2.0)
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricError> {
    check_len(scores.len(), labels.len())?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    class_counts(labels)
}

/// Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly,
/// ties counting one half. Pair counts are kept as integers.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (p, n) = check_scores(scores, labels)?;
    let mut neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    neg.sort_by(f64::total_cmp);
    let mut twice_wins: u64 = 0;
    for (&s, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        let below = neg.partition_point(|&v| v < s);
        let tied = neg.partition_point(|&v| v <= s) - below;
        twice_wins += 2 * below as u64 + tied as u64;
    }
    Ok(twice_wins as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; infinite for the origin.
    pub threshold: f64,
}

/// ROC points sweeping unique scores in descending order, ties grouped,
/// from (0, 0) to (1, 1).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>, MetricError> {
    let (p, n) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold: t,
        });
    }
    Ok(points)
}

/// Trapezoidal area under a polyline of ROC points.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

/// Scored predictions with ground truth, optionally grouped by site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub sites: Option<Vec<String>>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Decisions `score > threshold`.
    pub fn decisions(&self, threshold: f64) -> Vec<bool> {
        self.scores.iter().map(|&s| s > threshold).collect()
    }

    /// CSV `id,score,label[,site]` with labels as `1`/`0`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(if self.sites.is_some() {
            "id,score,label,site\n"
        } else {
            "id,score,label\n"
        });
        for i in 0..self.len() {
            let _ = write!(out, "{},{},{}", self.ids[i], self.scores[i], u8::from(self.labels[i]));
            if let Some(s) = &self.sites {
                let _ = write!(out, ",{}", s[i]);
            }
            out.push('\n');
        }
        out
    }

    /// Reads a CSV with at least `id`, `score` and `label` columns; `site` is optional.
    pub fn parse(text: &str) -> Result<Self, MetricError> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| MetricError::Parse(e.to_string()))?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (Some(ci), Some(cs), Some(cl)) = (col("id"), col("score"), col("label")) else {
            return Err(MetricError::Parse("need `id`, `score` and `label` columns".into()));
        };
        let csite = col("site");
        let mut set = PredictionSet {
            ids: vec![],
            scores: vec![],
            labels: vec![],
            sites: csite.map(|_| vec![]),
        };
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| MetricError::Parse(e.to_string()))?;
            let bad = |what: &str| MetricError::Parse(format!("row {}: bad {what}", line + 1));
            set.ids.push(rec.get(ci).ok_or_else(|| bad("id"))?.trim().to_string());
            set.scores.push(
                rec.get(cs)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| bad("score"))?,
            );
            set.labels.push(match rec.get(cl).map(str::trim) {
                Some("1" | "pos" | "true") => true,
                Some("0" | "neg" | "false") => false,
                _ => return Err(bad("label")),
            });
            if let (Some(c), Some(sites)) = (csite, set.sites.as_mut()) {
                sites.push(rec.get(c).ok_or_else(|| bad("site"))?.trim().to_string());
            }
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, MetricError> {
        let text = fs::read_to_string(path).map_err(|e| MetricError::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
