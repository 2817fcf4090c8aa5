//! Per-site class and acquisition-modality counts.

use std::fmt;

use serde::Serialize;

use super::manifest::{DatasetManifest, Label, Modality};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SiteComposition {
    pub site: String,
    pub positives: usize,
    pub negatives: usize,
    /// Records with an `unknown` label; not part of the printed table.
    pub unknown: usize,
    pub cr: usize,
    pub dr: usize,
}

impl SiteComposition {
    fn add(&mut self, other: &SiteComposition) {
        self.positives += other.positives;
        self.negatives += other.negatives;
        self.unknown += other.unknown;
        self.cr += other.cr;
        self.dr += other.dr;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompositionReport {
    pub sites: Vec<SiteComposition>,
    pub total: SiteComposition,
}

/// Tallies the manifest, one row per vocabulary site (zero rows included).
pub fn site_composition_report(manifest: &DatasetManifest) -> CompositionReport {
    let mut sites: Vec<SiteComposition> = manifest
        .site_vocabulary()
        .iter()
        .map(|s| SiteComposition {
            site: s.clone(),
            ..Default::default()
        })
        .collect();
    for r in manifest.records() {
        let idx = manifest
            .site_index(&r.site)
            .expect("manifest invariant: site in vocabulary");
        let row = &mut sites[idx];
        match r.label {
            Label::Positive => row.positives += 1,
            Label::Negative => row.negatives += 1,
            Label::Unknown => row.unknown += 1,
        }
        match r.modality {
            Modality::CR => row.cr += 1,
            Modality::DR => row.dr += 1,
        }
    }
    let mut total = SiteComposition {
        site: "Total".into(),
        ..Default::default()
    };
    for row in &sites {
        total.add(row);
    }
    CompositionReport { sites, total }
}

impl CompositionReport {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("site,positives,negatives,cr,dr\n");
        for row in self.sites.iter().chain(std::iter::once(&self.total)) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.site, row.positives, row.negatives, row.cr, row.dr
            ));
        }
        out
    }
}

impl fmt::Display for CompositionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .sites
            .iter()
            .map(|s| s.site.len())
            .max()
            .unwrap_or(0)
            .max("Institution".len());
        writeln!(
            f,
            "{:<width$}  {:>10}  {:>10}  {:>11}",
            "Institution", "Pos. cases", "Neg. cases", "CR/DR"
        )?;
        for (i, row) in self.sites.iter().chain(std::iter::once(&self.total)).enumerate() {
            if i == self.sites.len() {
                writeln!(f, "{}", "-".repeat(width + 39))?;
            }
            writeln!(
                f,
                "{:<width$}  {:>10}  {:>10}  {:>11}",
                row.site,
                row.positives,
                row.negatives,
                format!("{}/{}", row.cr, row.dr)
            )?;
        }
        if self.total.unknown > 0 {
            writeln!(f, "({} records with unknown label not counted)", self.total.unknown)?;
        }
        Ok(())
    }
}
