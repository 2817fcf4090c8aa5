//! Chest X-ray Covid-19 classification workbench.
//!
//! Two-stage transfer pipeline (findings-pretrained encoder, frozen-feature
//! binary head) with a site-debiasing regularizer, dataset tooling for
//! multi-institution manifests, and the metrics used to evaluate both models
//! and human reader studies.

pub mod biascore;
pub mod datakit;
pub mod evalkit;
pub mod probe;
pub mod trainer;
