//! Cross-validation of the head over a fold assignment, evaluated per site.

use std::fmt;
use std::fmt::Write as _;

use ndarray::{ArrayView2, Axis};
use serde::Serialize;

use super::config::TrainConfig;
use super::encoder::EncoderCheckpoint;
use super::head::train_covid_head;
use super::TrainError;
use crate::datakit::{DatasetManifest, FoldAssignment};
use crate::evalkit::balanced_accuracy;

/// Decision threshold on the predicted probability.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvPrediction {
    pub method: String,
    pub fold: usize,
    pub id: String,
    pub site: String,
    pub label: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: String,
    pub lambda: f64,
    /// `per_fold[fold][site]`; `None` where the site is absent or single-class.
    pub per_fold: Vec<Vec<Option<f64>>>,
    /// Mean over folds with a value, per site.
    pub cells: Vec<Option<f64>>,
    /// Mean of the available site cells.
    pub average: Option<f64>,
}

/// Rows are methods, columns are sites plus the average.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricTable {
    pub sites: Vec<String>,
    pub rows: Vec<MethodRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub table: MetricTable,
    pub predictions: Vec<CvPrediction>,
    pub warnings: Vec<String>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl MetricTable {
    /// `method,<sites...>,avg`; missing cells are empty.
    pub fn to_csv_string(&self) -> String {
        let mut out = format!("method,{},avg\n", self.sites.join(","));
        for r in &self.rows {
            let cells: Vec<String> = r.cells.iter().map(|&c| cell(c)).collect();
            let _ = writeln!(out, "{},{},{}", r.method, cells.join(","), cell(r.average));
        }
        out
    }
}

impl fmt::Display for MetricTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<10}", "Method")?;
        for s in &self.sites {
            write!(f, " {s:>8}")?;
        }
        writeln!(f, " {:>8}", "Avg.")?;
        for r in &self.rows {
            write!(f, "{:<10}", r.method)?;
            for c in r.cells.iter().chain([&r.average]) {
                match c {
                    Some(v) => write!(f, " {v:>8.4}")?,
                    None => write!(f, " {:>8}", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl CvReport {
    /// `method,fold,id,site,label,score` with scores in round-trip precision.
    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("method,fold,id,site,label,score\n");
        for p in &self.predictions {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                p.method,
                p.fold,
                p.id,
                p.site,
                u8::from(p.label),
                p.score
            );
        }
        out
    }
}

/// Trains a baseline head (lambda 0) and a FairKL head (`config.lambda`) on
/// each training split and scores the held-out fold. `features` holds one
/// row per manifest record, in manifest order. Records with unknown labels
/// are skipped.
pub fn cross_validate(
    manifest: &DatasetManifest,
    folds: &FoldAssignment,
    features: ArrayView2<'_, f64>,
    encoder: &EncoderCheckpoint,
    config: &TrainConfig,
) -> Result<CvReport, TrainError> {
    folds
        .check_against(manifest)
        .map_err(|e| TrainError::Data(e.to_string()))?;
    if features.nrows() != manifest.len() {
        return Err(TrainError::Data(format!(
            "{} feature rows for {} manifest records",
            features.nrows(),
            manifest.len()
        )));
    }
    let fold_of = folds.as_map();
    let sites = manifest.site_vocabulary().to_vec();
    let mut warnings = vec![];
    let mut rows_idx = vec![];
    let mut labels = vec![];
    let mut site_idx = vec![];
    let mut fold_idx = vec![];
    for (i, r) in manifest.records().iter().enumerate() {
        match r.label.as_binary() {
            Some(l) => {
                rows_idx.push(i);
                labels.push(l);
                site_idx.push(manifest.site_index(&r.site).expect("site in vocabulary"));
                fold_idx.push(fold_of[r.id.as_str()]);
            }
            None => warnings.push(format!("record `{}` has an unknown label; skipped", r.id)),
        }
    }

    let methods = [("baseline", 0.0), ("fairkl", config.lambda)];
    let mut predictions = vec![];
    let mut rows = vec![];
    for (name, lambda) in methods {
        let mut per_fold = vec![];
        for fold in 0..folds.k {
            let train: Vec<usize> = (0..rows_idx.len()).filter(|&j| fold_idx[j] != fold).collect();
            let test: Vec<usize> = (0..rows_idx.len()).filter(|&j| fold_idx[j] == fold).collect();
            let pick = |js: &[usize]| features.select(Axis(0), &js.iter().map(|&j| rows_idx[j]).collect::<Vec<_>>());
            let cfg = TrainConfig {
                lambda,
                seed: config.seed.wrapping_add(fold as u64),
                ..config.clone()
            };
            let head = train_covid_head(
                pick(&train).view(),
                &train.iter().map(|&j| labels[j]).collect::<Vec<_>>(),
                &train.iter().map(|&j| site_idx[j]).collect::<Vec<_>>(),
                sites.len(),
                encoder,
                &cfg,
            )?;
            let scores = if test.is_empty() {
                vec![]
            } else {
                head.model.predict_proba(pick(&test).view())?
            };
            let mut by_site: Vec<(Vec<bool>, Vec<bool>)> = vec![(vec![], vec![]); sites.len()];
            for (&j, &s) in test.iter().zip(&scores) {
                let rec = &manifest.records()[rows_idx[j]];
                by_site[site_idx[j]].0.push(s > DECISION_THRESHOLD);
                by_site[site_idx[j]].1.push(labels[j]);
                predictions.push(CvPrediction {
                    method: name.to_string(),
                    fold,
                    id: rec.id.clone(),
                    site: rec.site.clone(),
                    label: labels[j],
                    score: s,
                });
            }
            per_fold.push(
                by_site
                    .iter()
                    .map(|(pred, truth)| balanced_accuracy(pred, truth).ok())
                    .collect::<Vec<_>>(),
            );
        }
        let cells: Vec<Option<f64>> = (0..sites.len())
            .map(|s| mean_of(per_fold.iter().map(|f: &Vec<Option<f64>>| f[s])))
            .collect();
        let average = mean_of(cells.iter().copied());
        rows.push(MethodRow {
            method: name.to_string(),
            lambda,
            per_fold,
            cells,
            average,
        });
    }
    Ok(CvReport {
        table: MetricTable { sites, rows },
        predictions,
        warnings,
    })
}
