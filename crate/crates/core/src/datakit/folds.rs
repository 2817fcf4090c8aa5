//! Stratified k-fold assignment over (label, site) strata.
//!
//! Records sharing a `patient_id` form one unit and always land in the same
//! fold. Units inside each stratum are shuffled with the seed and dealt
//! round-robin; the dealing position carries over between strata so that the
//! folds also stay balanced in total size.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use super::manifest::{DatasetManifest, Label};

#[derive(Debug, Error)]
pub enum FoldError {
    #[error("k must be at least 2, got {0}")]
    TooFewFolds(usize),
    #[error("k={k} exceeds the number of splittable units ({units})")]
    TooManyFolds { k: usize, units: usize },
    #[error("fold file: {0}")]
    Parse(String),
    #[error("fold file io: {0}")]
    Io(#[from] std::io::Error),
    #[error("fold assignment does not match manifest: {0}")]
    Mismatch(String),
}

/// How strata were formed for an assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stratification {
    LabelAndSite,
    /// Fallback when some (label, site) stratum is smaller than k.
    LabelOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// Record id to fold index, in manifest order.
    pub assignment: Vec<(String, usize)>,
    pub stratification: Stratification,
    /// Diagnostics for degraded stratification.
    pub warnings: Vec<String>,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.iter().find(|(i, _)| i == id).map(|&(_, f)| f)
    }

    pub fn as_map(&self) -> HashMap<&str, usize> {
        self.assignment.iter().map(|(i, f)| (i.as_str(), *f)).collect()
    }

    pub fn ids_in_fold(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, f)| *f == fold)
            .map(|(i, _)| i.as_str())
            .collect()
    }

    /// Fold file: a `# k=.. seed=..` comment, then an `id,fold` table.
    pub fn to_csv_string(&self) -> String {
        let mut out = format!("# k={} seed={}\nid,fold\n", self.k, self.seed);
        for (id, fold) in &self.assignment {
            out.push_str(&format!("{id},{fold}\n"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), FoldError> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, FoldError> {
        let mut lines = text.lines();
        let meta = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| FoldError::Parse("missing `# k=.. seed=..` line".into()))?;
        let mut k = None;
        let mut seed = None;
        for part in meta.split_whitespace() {
            if let Some(v) = part.strip_prefix("k=") {
                k = v.parse().ok();
            } else if let Some(v) = part.strip_prefix("seed=") {
                seed = v.parse().ok();
            }
        }
        let (Some(k), Some(seed)) = (k, seed) else {
            return Err(FoldError::Parse(format!("bad metadata line `{meta}`")));
        };
        if lines.next().map(str::trim) != Some("id,fold") {
            return Err(FoldError::Parse("expected `id,fold` header".into()));
        }
        let mut assignment = vec![];
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (id, fold) = line
                .rsplit_once(',')
                .ok_or_else(|| FoldError::Parse(format!("line {}: `{line}`", i + 3)))?;
            let fold: usize = fold
                .trim()
                .parse()
                .map_err(|_| FoldError::Parse(format!("line {}: bad fold `{fold}`", i + 3)))?;
            if fold >= k {
                return Err(FoldError::Parse(format!("line {}: fold {fold} >= k={k}", i + 3)));
            }
            assignment.push((id.trim().to_string(), fold));
        }
        Ok(Self {
            k,
            seed,
            assignment,
            stratification: Stratification::LabelAndSite,
            warnings: vec![],
        })
    }

    pub fn load(path: &Path) -> Result<Self, FoldError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Checks that the folds cover exactly the manifest's ids.
    pub fn check_against(&self, manifest: &DatasetManifest) -> Result<(), FoldError> {
        let map = self.as_map();
        if map.len() != self.assignment.len() {
            return Err(FoldError::Mismatch("duplicate ids in fold file".into()));
        }
        if map.len() != manifest.len() {
            return Err(FoldError::Mismatch(format!(
                "{} ids in folds, {} records in manifest",
                map.len(),
                manifest.len()
            )));
        }
        if let Some(r) = manifest.records().iter().find(|r| !map.contains_key(r.id.as_str())) {
            return Err(FoldError::Mismatch(format!("record `{}` has no fold", r.id)));
        }
        Ok(())
    }
}

type StratumKey = (Label, Option<String>);

pub fn stratified_kfold(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldAssignment, FoldError> {
    if k < 2 {
        return Err(FoldError::TooFewFolds(k));
    }
    // Units: patient groups, or single records when no patient id is given.
    let mut units: Vec<Vec<usize>> = vec![];
    let mut by_patient: HashMap<&str, usize> = HashMap::new();
    for (i, r) in manifest.records().iter().enumerate() {
        match r.patient_id.as_deref() {
            Some(p) => match by_patient.get(p) {
                Some(&u) => units[u].push(i),
                None => {
                    by_patient.insert(p, units.len());
                    units.push(vec![i]);
                }
            },
            None => units.push(vec![i]),
        }
    }
    if k > units.len() {
        return Err(FoldError::TooManyFolds { k, units: units.len() });
    }

    let records = manifest.records();
    let strata_for = |with_site: bool| {
        let mut strata: BTreeMap<StratumKey, Vec<usize>> = BTreeMap::new();
        for (u, members) in units.iter().enumerate() {
            let first = &records[members[0]];
            let key = (first.label, with_site.then(|| first.site.clone()));
            strata.entry(key).or_default().push(u);
        }
        strata
    };

    let mut warnings = vec![];
    let mut stratification = Stratification::LabelAndSite;
    let mut strata = strata_for(true);
    if let Some(((label, site), members)) = strata.iter().find(|(_, m)| m.len() < k) {
        warnings.push(format!(
            "stratum (label={label}, site={}) has {} units < k={k}; stratifying by label only",
            site.as_deref().unwrap_or("?"),
            members.len()
        ));
        stratification = Stratification::LabelOnly;
        strata = strata_for(false);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![usize::MAX; records.len()];
    let mut cursor = 0;
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        for &u in members.iter() {
            for &i in &units[u] {
                folds[i] = cursor % k;
            }
            cursor += 1;
        }
    }
    Ok(FoldAssignment {
        k,
        seed,
        assignment: records.iter().zip(folds).map(|(r, f)| (r.id.clone(), f)).collect(),
        stratification,
        warnings,
    })
}
