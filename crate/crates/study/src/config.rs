use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::report::ModelOutput;
use crate::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderInfo {
    pub id: String,
    #[serde(default)]
    pub affiliation: String,
    #[serde(default)]
    pub years_experience: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyImage {
    pub id: String,
    /// Ground truth; stays on the server.
    pub label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dicom: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_output: Option<ModelOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub id: String,
    pub images: Vec<StudyImage>,
    pub readers: Vec<ReaderInfo>,
    #[serde(default)]
    pub washout_days: u32,
    #[serde(default)]
    pub seed: u64,
    /// Opens the assisted arm as soon as the blind arm is complete.
    #[serde(default)]
    pub washout_override: bool,
}

fn valid_id(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !s.starts_with('.')
}

impl StudyConfig {
    /// Checks the config; returns non-fatal warnings (e.g. label imbalance).
    pub fn validate(&self) -> Result<Vec<String>, ServiceError> {
        let bad = |m: String| Err(ServiceError::InvalidConfig(m));
        if !valid_id(&self.id) {
            return bad(format!(
                "study id `{}` must be 1-128 characters of [A-Za-z0-9._-]",
                self.id
            ));
        }
        if self.images.is_empty() {
            return bad("image list is empty".into());
        }
        if self.readers.is_empty() {
            return bad("no readers".into());
        }
        let mut seen = HashSet::new();
        for img in &self.images {
            if !valid_id(&img.id) {
                return bad(format!(
                    "image id `{}` must be 1-128 characters of [A-Za-z0-9._-]",
                    img.id
                ));
            }
            if !seen.insert(&img.id) {
                return bad(format!("duplicate image `{}`", img.id));
            }
            if img.model_output.is_none() {
                return bad(format!("image `{}` has no model_output for the assisted arm", img.id));
            }
        }
        let mut seen = HashSet::new();
        for r in &self.readers {
            if !valid_id(&r.id) {
                return bad(format!(
                    "reader id `{}` must be 1-128 characters of [A-Za-z0-9._-]",
                    r.id
                ));
            }
            if !seen.insert(&r.id) {
                return bad(format!("duplicate reader `{}`", r.id));
            }
        }
        let positives = self.images.iter().filter(|i| i.label).count();
        let negatives = self.images.len() - positives;
        let mut warnings = vec![];
        if positives != negatives {
            warnings.push(format!(
                "image set is not label-balanced: {positives} positive, {negatives} negative"
            ));
        }
        Ok(warnings)
    }
}
