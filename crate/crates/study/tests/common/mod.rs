#![allow(dead_code)]

use std::sync::Arc;

use chrono::{DateTime, Utc};
use cxr_study::report::FindingProbability;
use cxr_study::{ManualClock, ModelOutput, ReaderInfo, StudyConfig, StudyImage};

pub fn t0() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2026-03-02T09:00:00Z")
        .unwrap()
        .with_timezone(&Utc)
}

pub fn clock() -> Arc<ManualClock> {
    Arc::new(ManualClock::new(t0()))
}

pub fn output(p: f64) -> ModelOutput {
    ModelOutput {
        covid_probability: p,
        findings: vec![
            FindingProbability {
                name: "No Finding".into(),
                probability: 0.9,
            },
            FindingProbability {
                name: "Lung Opacity".into(),
                probability: 0.51,
            },
            FindingProbability {
                name: "Pleural Effusion".into(),
                probability: 0.5,
            },
        ],
    }
}

pub fn config(id: &str, n_images: usize, readers: &[&str], washout_days: u32) -> StudyConfig {
    StudyConfig {
        id: id.into(),
        images: (0..n_images)
            .map(|i| StudyImage {
                id: format!("{id}-im{i}"),
                label: i % 2 == 0,
                dicom: None,
                model_output: Some(output(0.1 + 0.8 * (i % 2 == 0) as u8 as f64)),
            })
            .collect(),
        readers: readers
            .iter()
            .map(|r| ReaderInfo {
                id: r.to_string(),
                affiliation: "test".into(),
                years_experience: 3,
            })
            .collect(),
        washout_days,
        seed: 42,
        washout_override: false,
    }
}

/// True if any object key anywhere in `v` is `label`.
pub fn has_label_key(v: &serde_json::Value) -> bool {
    match v {
        serde_json::Value::Object(m) => m.iter().any(|(k, v)| k == "label" || has_label_key(v)),
        serde_json::Value::Array(a) => a.iter().any(has_label_key),
        _ => false,
    }
}
