//! Dataset manifests: one row per radiograph.
//!
//! File layout (UTF-8, comma separated):
//!
//! ```text
//! # schema_version=1
//! # sites=CDSS,SLG,MRZ,MNZ
//! id,site,modality,label,path,width,height,bits_stored[,patient_id]
//! ```
//!
//! The leading `#` lines are optional. Without a `sites=` line the site
//! vocabulary is the order of first appearance.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

const BASE_COLUMNS: [&str; 8] = [
    "id",
    "site",
    "modality",
    "label",
    "path",
    "width",
    "height",
    "bits_stored",
];

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}, field `{field}`: invalid value `{value}`")]
    Field {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: site `{site}` is not in the declared vocabulary")]
    UnknownSite { line: usize, site: String },
    #[error("manifest has no records")]
    Empty,
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    CR,
    DR,
}

impl FromStr for Modality {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "CR" => Ok(Modality::CR),
            "DR" => Ok(Modality::DR),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::CR => "CR",
            Modality::DR => "DR",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    Unknown,
}

impl Label {
    /// `Some(true)` for positive, `Some(false)` for negative.
    pub fn as_binary(self) -> Option<bool> {
        match self {
            Label::Positive => Some(true),
            Label::Negative => Some(false),
            Label::Unknown => None,
        }
    }
}

impl FromStr for Label {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "pos" => Ok(Label::Positive),
            "neg" => Ok(Label::Negative),
            "unknown" => Ok(Label::Unknown),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "pos",
            Label::Negative => "neg",
            Label::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub site: String,
    pub modality: Modality,
    pub label: Label,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub bits_stored: u16,
    pub patient_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
    site_vocabulary: Vec<String>,
    schema_version: u32,
    /// Directory relative record paths are resolved against.
    base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    /// Validates ids and sites. An empty `site_vocabulary` is inferred from the records.
    pub fn new(records: Vec<ImageRecord>, site_vocabulary: Vec<String>) -> Result<Self, ManifestError> {
        let vocab = if site_vocabulary.is_empty() {
            infer_vocabulary(&records)
        } else {
            site_vocabulary
        };
        validate(&records, &vocab, 0)?;
        Ok(Self {
            records,
            site_vocabulary: vocab,
            schema_version: SCHEMA_VERSION,
            base_dir: None,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn site_vocabulary(&self) -> &[String] {
        &self.site_vocabulary
    }

    pub fn schema_version(&self) -> u32 {
        self.schema_version
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn site_index(&self, site: &str) -> Option<usize> {
        self.site_vocabulary.iter().position(|s| s == site)
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    /// Absolute (or base-relative) location of a record's pixels.
    pub fn pixel_path(&self, record: &ImageRecord) -> PathBuf {
        match &self.base_dir {
            Some(dir) if record.path.is_relative() => dir.join(&record.path),
            _ => record.path.clone(),
        }
    }

    /// A manifest restricted to `ids` (order preserved from `self`).
    pub fn subset(&self, keep: impl Fn(&ImageRecord) -> bool) -> Self {
        Self {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            site_vocabulary: self.site_vocabulary.clone(),
            schema_version: self.schema_version,
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn to_csv_string(&self) -> String {
        let with_patient = self.records.iter().any(|r| r.patient_id.is_some());
        let mut out = format!(
            "# schema_version={}\n# sites={}\n",
            self.schema_version,
            self.site_vocabulary.join(",")
        );
        let mut writer = csv::WriterBuilder::new().from_writer(vec![]);
        let mut header: Vec<&str> = BASE_COLUMNS.to_vec();
        if with_patient {
            header.push("patient_id");
        }
        writer.write_record(&header).expect("in-memory write");
        for r in &self.records {
            let mut row = vec![
                r.id.clone(),
                r.site.clone(),
                r.modality.to_string(),
                r.label.to_string(),
                r.path.to_string_lossy().into_owned(),
                r.width.to_string(),
                r.height.to_string(),
                r.bits_stored.to_string(),
            ];
            if with_patient {
                row.push(r.patient_id.clone().unwrap_or_default());
            }
            writer.write_record(&row).expect("in-memory write");
        }
        out.push_str(&String::from_utf8(writer.into_inner().expect("flush")).expect("utf8"));
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        fs::write(path, self.to_csv_string()).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn infer_vocabulary(records: &[ImageRecord]) -> Vec<String> {
    let mut vocab: Vec<String> = vec![];
    for r in records {
        if !vocab.contains(&r.site) {
            vocab.push(r.site.clone());
        }
    }
    vocab
}

fn validate(records: &[ImageRecord], vocab: &[String], first_line: usize) -> Result<(), ManifestError> {
    if records.is_empty() {
        return Err(ManifestError::Empty);
    }
    let mut seen = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        let line = first_line + i;
        if !seen.insert(r.id.as_str()) {
            return Err(ManifestError::DuplicateId { line, id: r.id.clone() });
        }
        if !vocab.contains(&r.site) {
            return Err(ManifestError::UnknownSite {
                line,
                site: r.site.clone(),
            });
        }
    }
    Ok(())
}

/// Reads and validates a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut manifest = parse_manifest(&text)?;
    manifest.base_dir = path.parent().map(Path::to_path_buf);
    Ok(manifest)
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest, ManifestError> {
    let mut schema_version = SCHEMA_VERSION;
    let mut declared_sites: Option<Vec<String>> = None;
    let mut comment_lines = 0;
    for line in text.lines() {
        let Some(comment) = line.strip_prefix('#') else {
            break;
        };
        comment_lines += 1;
        let comment = comment.trim();
        if let Some(v) = comment.strip_prefix("schema_version=") {
            schema_version = v.trim().parse().map_err(|_| ManifestError::Parse {
                line: comment_lines,
                message: format!("bad schema_version `{v}`"),
            })?;
        } else if let Some(v) = comment.strip_prefix("sites=") {
            declared_sites = Some(
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect(),
            );
        }
    }
    if schema_version != SCHEMA_VERSION {
        return Err(ManifestError::SchemaVersion(schema_version));
    }
    let body: String = text.lines().skip(comment_lines).map(|l| format!("{l}\n")).collect();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let header_line = comment_lines + 1;
    let headers = reader
        .headers()
        .map_err(|e| ManifestError::Parse {
            line: header_line,
            message: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    let with_patient = match names.as_slice() {
        n if n == BASE_COLUMNS => false,
        n if n.len() == 9 && n[..8] == BASE_COLUMNS && n[8] == "patient_id" => true,
        _ => {
            return Err(ManifestError::Parse {
                line: header_line,
                message: format!("unexpected header `{}`", names.join(",")),
            })
        }
    };

    let mut records = vec![];
    for (i, row) in reader.records().enumerate() {
        let line = header_line + 1 + i;
        let row = row.map_err(|e| ManifestError::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |idx: usize| row.get(idx).unwrap_or("");
        let bad = |name: &'static str, idx: usize| ManifestError::Field {
            line,
            field: name,
            value: field(idx).to_string(),
        };
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(bad("id", 0));
        }
        records.push(ImageRecord {
            id,
            site: field(1).to_string(),
            modality: field(2).parse().map_err(|_| bad("modality", 2))?,
            label: field(3).parse().map_err(|_| bad("label", 3))?,
            path: PathBuf::from(field(4)),
            width: field(5).parse().map_err(|_| bad("width", 5))?,
            height: field(6).parse().map_err(|_| bad("height", 6))?,
            bits_stored: field(7).parse().map_err(|_| bad("bits_stored", 7))?,
            patient_id: if with_patient {
                Some(field(8).to_string()).filter(|p| !p.is_empty())
            } else {
                None
            },
        });
    }
    let vocab = declared_sites.unwrap_or_else(|| infer_vocabulary(&records));
    validate(&records, &vocab, header_line + 1)?;
    Ok(DatasetManifest {
        records,
        site_vocabulary: vocab,
        schema_version,
        base_dir: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE: &str = "id,site,modality,label,path,width,height,bits_stored\n\
        a,CDSS,CR,pos,img/a.png,64,64,16\n\
        b,SLG,DR,neg,img/b.png,64,64,16\n\
        c,CDSS,DR,unknown,img/c.png,32,32,12\n";

    #[test]
    fn parses_well_formed_file() {
        let m = parse_manifest(THREE).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.site_vocabulary(), ["CDSS", "SLG"]);
        assert_eq!(m.records()[2].label, Label::Unknown);
        assert_eq!(m.records()[1].modality, Modality::DR);
    }

    #[test]
    fn duplicate_id_is_named() {
        let text = format!("{THREE}a,SLG,CR,neg,x.png,1,1,8\n");
        let err = parse_manifest(&text).unwrap_err();
        assert!(
            matches!(&err, ManifestError::DuplicateId { id, line: 5 } if id == "a"),
            "{err}"
        );
    }

    #[test]
    fn bad_tokens_report_line_and_field() {
        let text = THREE.replace("b,SLG,DR,neg", "b,SLG,XR,neg");
        let err = parse_manifest(&text).unwrap_err();
        assert!(matches!(
            err,
            ManifestError::Field {
                line: 3,
                field: "modality",
                ..
            }
        ));
        let text = THREE.replace("a,CDSS,CR,pos", "a,CDSS,CR,positive");
        assert!(matches!(
            parse_manifest(&text).unwrap_err(),
            ManifestError::Field {
                line: 2,
                field: "label",
                ..
            }
        ));
    }

    #[test]
    fn declared_vocabulary_rejects_unknown_site() {
        let text = format!("# sites=CDSS\n{THREE}");
        assert!(matches!(
            parse_manifest(&text).unwrap_err(),
            ManifestError::UnknownSite { line: 4, .. }
        ));
    }

    #[test]
    fn header_only_is_empty_error() {
        let text = "id,site,modality,label,path,width,height,bits_stored\n";
        assert!(matches!(parse_manifest(text), Err(ManifestError::Empty)));
    }

    #[test]
    fn patient_column_round_trips() {
        let text = "id,site,modality,label,path,width,height,bits_stored,patient_id\n\
            a,S0,CR,pos,a.png,8,8,16,p1\n\
            b,S0,CR,pos,b.png,8,8,16,\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(m.records()[0].patient_id.as_deref(), Some("p1"));
        assert_eq!(m.records()[1].patient_id, None);
        assert_eq!(parse_manifest(&m.to_csv_string()).unwrap(), m);
    }
}
