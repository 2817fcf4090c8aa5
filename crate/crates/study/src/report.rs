//! AI report shown next to the image in the assisted arm.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Findings entry that is never highlighted.
pub const NO_FINDING: &str = "No Finding";
pub const FLAG_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
#[error("probability for `{name}` is {value}, outside [0, 1]")]
pub struct ReportError {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingProbability {
    pub name: String,
    pub probability: f64,
}

/// Precomputed model probabilities for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub covid_probability: f64,
    #[serde(default)]
    pub findings: Vec<FindingProbability>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedFinding {
    pub name: String,
    pub probability: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiReport {
    pub image: String,
    pub covid_probability: f64,
    pub covid_flagged: bool,
    pub findings: Vec<FlaggedFinding>,
}

fn check(name: &str, p: f64) -> Result<f64, ReportError> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(ReportError {
            name: name.to_string(),
            value: p,
        })
    }
}

/// Flags every probability strictly above 0.5, except the "No Finding" entry.
pub fn build_ai_report(image: &str, output: &ModelOutput) -> Result<AiReport, ReportError> {
    let covid = check("Covid-19", output.covid_probability)?;
    let findings = output
        .findings
        .iter()
        .map(|f| {
            let p = check(&f.name, f.probability)?;
            Ok(FlaggedFinding {
                name: f.name.clone(),
                probability: p,
                flagged: f.name != NO_FINDING && p > FLAG_THRESHOLD,
            })
        })
        .collect::<Result<_, ReportError>>()?;
    Ok(AiReport {
        image: image.to_string(),
        covid_probability: covid,
        covid_flagged: covid > FLAG_THRESHOLD,
        findings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn output(covid: f64, findings: &[(&str, f64)]) -> ModelOutput {
        ModelOutput {
            covid_probability: covid,
            findings: findings
                .iter()
                .map(|&(n, p)| FindingProbability {
                    name: n.into(),
                    probability: p,
                })
                .collect(),
        }
    }

    #[test]
    fn strict_threshold_and_no_finding_exception() {
        assert!(build_ai_report("i", &output(0.51, &[])).unwrap().covid_flagged);
        assert!(!build_ai_report("i", &output(0.5, &[])).unwrap().covid_flagged);
        let r = build_ai_report(
            "i",
            &output(0.2, &[("Edema", 0.51), ("No Finding", 0.9), ("Consolidation", 0.5)]),
        )
        .unwrap();
        let flags: Vec<(&str, bool)> = r.findings.iter().map(|f| (f.name.as_str(), f.flagged)).collect();
        assert_eq!(
            flags,
            vec![("Edema", true), ("No Finding", false), ("Consolidation", false)]
        );
    }

    #[test]
    fn out_of_range_probability_is_an_error() {
        assert!(build_ai_report("i", &output(1.2, &[])).is_err());
        assert!(build_ai_report("i", &output(0.2, &[("Edema", -0.1)])).is_err());
        assert!(build_ai_report("i", &output(f64::NAN, &[])).is_err());
    }
}
