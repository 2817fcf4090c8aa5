//! Study state machine over per-study journals.
//!
//! Every mutation is appended to the study's journal (and fsynced) while the
//! study lock is held, before the in-memory state changes and before the
//! caller sees a result. On start-up the state is rebuilt by replaying the
//! journals found in the data directory.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Duration, SubsecRound, Utc};
use cxr_core::evalkit::{duration_between, events_to_csv, Arm, ReadingEvent, MAX_SEVERITY};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::Clock;
use crate::config::{StudyConfig, StudyImage};
use crate::dicom::{read_dicom, DicomImage};
use crate::journal::{Journal, JournalRecord};
use crate::report::{build_ai_report, AiReport};
use crate::ServiceError;

/// Shortest duration a stored reading can have.
pub const MIN_DURATION_MS: i64 = 1;

/// Image order for one (reader, arm): a permutation of the study images.
pub fn reading_sequence(config: &StudyConfig, reader: &str, arm: Arm) -> Vec<String> {
    let mut h = Sha256::new();
    for part in [
        config.id.as_bytes(),
        &config.seed.to_le_bytes(),
        reader.as_bytes(),
        arm.to_string().as_bytes(),
    ] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut ids: Vec<String> = config.images.iter().map(|i| i.id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::from_seed(seed));
    ids
}

/// Reader-facing response of `next_item`. Carries no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextItem {
    Item {
        study: String,
        reader: String,
        arm: Arm,
        image: String,
        /// 1-based position in this reader's sequence for the arm.
        position: usize,
        total: usize,
        displayed_at: DateTime<Utc>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        report: Option<AiReport>,
    },
    Completed {
        study: String,
        reader: String,
        arm: Arm,
        total: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub reader: String,
    pub image: String,
    /// Optional cross-check against the open issuance.
    #[serde(default)]
    pub arm: Option<Arm>,
    pub severity: i64,
    /// Free-form client data; logged, not stored.
    #[serde(default)]
    pub client_metadata: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub id: String,
    pub n_images: usize,
    pub n_readers: usize,
    pub n_events: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
struct Issuance {
    image: String,
    displayed_at: DateTime<Utc>,
}

#[derive(Debug, Default)]
struct Session {
    sequence: Vec<String>,
    /// Number of sequence entries already issued.
    issued: usize,
    open: Option<Issuance>,
    completed_at: Option<DateTime<Utc>>,
}

#[derive(Debug)]
struct Study {
    config: StudyConfig,
    warnings: Vec<String>,
    journal: Journal,
    sessions: BTreeMap<(String, Arm), Session>,
    events: Vec<ReadingEvent>,
    answered: HashSet<(String, String, Arm)>,
    /// Memoised export; cleared on every new event.
    export: Option<Arc<String>>,
}

impl Study {
    fn new(config: StudyConfig, warnings: Vec<String>, journal: Journal) -> Self {
        let mut sessions = BTreeMap::new();
        for r in &config.readers {
            for arm in Arm::ALL {
                sessions.insert(
                    (r.id.clone(), arm),
                    Session {
                        sequence: reading_sequence(&config, &r.id, arm),
                        ..Default::default()
                    },
                );
            }
        }
        Self {
            config,
            warnings,
            journal,
            sessions,
            events: vec![],
            answered: HashSet::new(),
            export: None,
        }
    }

    fn image(&self, id: &str) -> Option<&StudyImage> {
        self.config.images.iter().find(|i| i.id == id)
    }

    fn session(&mut self, reader: &str, arm: Arm) -> Result<&mut Session, ServiceError> {
        self.sessions
            .get_mut(&(reader.to_string(), arm))
            .ok_or_else(|| ServiceError::UnknownReader(reader.to_string()))
    }

    fn check_unlocked(&self, reader: &str, now: DateTime<Utc>) -> Result<(), ServiceError> {
        let blind = &self.sessions[&(reader.to_string(), Arm::Blind)];
        let Some(done) = blind.completed_at else {
            return Err(ServiceError::ArmLocked { unlock_at: None });
        };
        if self.config.washout_override {
            return Ok(());
        }
        let unlock_at = done + Duration::days(self.config.washout_days as i64);
        if now < unlock_at {
            return Err(ServiceError::ArmLocked {
                unlock_at: Some(unlock_at),
            });
        }
        Ok(())
    }

    fn report_for(&self, image: &str) -> Result<AiReport, ServiceError> {
        let img = self
            .image(image)
            .ok_or_else(|| ServiceError::UnknownImage(image.to_string()))?;
        let output = img
            .model_output
            .as_ref()
            .ok_or_else(|| ServiceError::ReportNotAvailable(image.to_string()))?;
        Ok(build_ai_report(image, output)?)
    }

    fn item(&self, reader: &str, arm: Arm) -> NextItem {
        let s = &self.sessions[&(reader.to_string(), arm)];
        match &s.open {
            Some(open) => NextItem::Item {
                study: self.config.id.clone(),
                reader: reader.to_string(),
                arm,
                image: open.image.clone(),
                position: s.issued,
                total: s.sequence.len(),
                displayed_at: open.displayed_at,
                report: match arm {
                    // validated configs always carry model output
                    Arm::Assisted => self.report_for(&open.image).ok(),
                    Arm::Blind => None,
                },
            },
            None => NextItem::Completed {
                study: self.config.id.clone(),
                reader: reader.to_string(),
                arm,
                total: s.sequence.len(),
            },
        }
    }

    /// Applies a journal record to the in-memory state.
    fn apply(&mut self, record: JournalRecord) -> Result<(), ServiceError> {
        match record {
            JournalRecord::Created { .. } => return Err(ServiceError::Corrupt("second `created` record".into())),
            JournalRecord::Issued {
                reader,
                arm,
                image,
                displayed_at,
            } => {
                let s = self.session(&reader, arm)?;
                if s.open.is_some() || s.sequence.get(s.issued) != Some(&image) {
                    return Err(ServiceError::Corrupt(format!(
                        "issuance of `{image}` to `{reader}` out of sequence"
                    )));
                }
                s.issued += 1;
                s.open = Some(Issuance { image, displayed_at });
            }
            JournalRecord::Reading { event } => {
                let s = self.session(&event.reader, event.arm)?;
                if s.open.as_ref().map(|o| &o.image) != Some(&event.image) {
                    return Err(ServiceError::Corrupt(format!(
                        "reading of `{}` by `{}` without issuance",
                        event.image, event.reader
                    )));
                }
                s.open = None;
                if s.issued == s.sequence.len() {
                    s.completed_at = Some(event.submitted_at);
                }
                self.answered
                    .insert((event.reader.clone(), event.image.clone(), event.arm));
                self.events.push(event);
                self.export = None;
            }
        }
        Ok(())
    }

    fn record(&mut self, record: JournalRecord) -> Result<(), ServiceError> {
        self.journal.append(&record)?;
        self.apply(record)
    }
}

/// All studies under one data directory.
pub struct StudyService {
    data_dir: PathBuf,
    clock: Arc<dyn Clock>,
    studies: RwLock<BTreeMap<String, Arc<Mutex<Study>>>>,
}

impl std::fmt::Debug for StudyService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StudyService")
            .field("data_dir", &self.data_dir)
            .finish_non_exhaustive()
    }
}

fn journal_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.jsonl"))
}

impl StudyService {
    /// Opens (or initialises) `data_dir` and replays every `*.jsonl` journal in it.
    pub fn open(data_dir: &Path, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        let io = |e| ServiceError::Io(data_dir.display().to_string(), e);
        fs::create_dir_all(data_dir).map_err(io)?;
        let mut paths: Vec<PathBuf> = fs::read_dir(data_dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        let mut studies = BTreeMap::new();
        for path in paths {
            let (journal, records) = Journal::open(&path)?;
            let mut records = records.into_iter();
            let Some(JournalRecord::Created { config, .. }) = records.next() else {
                return Err(ServiceError::Corrupt(format!(
                    "{}: first record is not `created`",
                    path.display()
                )));
            };
            let warnings = config.validate()?;
            let id = config.id.clone();
            let mut study = Study::new(config, warnings, journal);
            for r in records {
                study.apply(r)?;
            }
            tracing::info!(study = %id, events = study.events.len(), "replayed journal");
            studies.insert(id, Arc::new(Mutex::new(study)));
        }
        Ok(Self {
            data_dir: data_dir.to_path_buf(),
            clock,
            studies: RwLock::new(studies),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    /// Timestamps are kept at millisecond resolution so exports round-trip.
    fn now(&self) -> DateTime<Utc> {
        self.clock.now().trunc_subsecs(3)
    }

    fn study(&self, id: &str) -> Result<Arc<Mutex<Study>>, ServiceError> {
        self.studies
            .read()
            .expect("study map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownStudy(id.to_string()))
    }

    pub fn study_ids(&self) -> Vec<String> {
        self.studies.read().expect("study map lock").keys().cloned().collect()
    }

    pub fn create_study(&self, config: StudyConfig) -> Result<StudySummary, ServiceError> {
        let warnings = config.validate()?;
        for img in &config.images {
            build_ai_report(&img.id, img.model_output.as_ref().expect("validated"))?;
        }
        let mut map = self.studies.write().expect("study map lock");
        let path = journal_path(&self.data_dir, &config.id);
        if map.contains_key(&config.id) || path.exists() {
            return Err(ServiceError::DuplicateStudy(config.id));
        }
        let journal = Journal::create(
            &path,
            &JournalRecord::Created {
                at: self.now(),
                config: config.clone(),
            },
        )?;
        for w in &warnings {
            tracing::warn!(study = %config.id, "{w}");
        }
        let summary = StudySummary {
            id: config.id.clone(),
            n_images: config.images.len(),
            n_readers: config.readers.len(),
            n_events: 0,
            warnings: warnings.clone(),
        };
        map.insert(
            config.id.clone(),
            Arc::new(Mutex::new(Study::new(config, warnings, journal))),
        );
        Ok(summary)
    }

    pub fn summary(&self, study: &str) -> Result<StudySummary, ServiceError> {
        let s = self.study(study)?;
        let s = s.lock().expect("study lock");
        Ok(StudySummary {
            id: s.config.id.clone(),
            n_images: s.config.images.len(),
            n_readers: s.config.readers.len(),
            n_events: s.events.len(),
            warnings: s.warnings.clone(),
        })
    }

    /// Issues the reader's next image in `arm`. Asking again before
    /// submitting returns the same open item with its original timestamp.
    pub fn next_item(&self, study: &str, reader: &str, arm: Arm) -> Result<NextItem, ServiceError> {
        let handle = self.study(study)?;
        let mut s = handle.lock().expect("study lock");
        let now = self.now();
        s.session(reader, arm)?;
        if arm == Arm::Assisted {
            s.check_unlocked(reader, now)?;
        }
        let sess = &s.sessions[&(reader.to_string(), arm)];
        if sess.open.is_none() && sess.issued < sess.sequence.len() {
            let image = sess.sequence[sess.issued].clone();
            s.record(JournalRecord::Issued {
                reader: reader.to_string(),
                arm,
                image,
                displayed_at: now,
            })?;
        }
        Ok(s.item(reader, arm))
    }

    /// Stores a severity score for the reader's open issuance.
    pub fn submit_reading(&self, study: &str, req: &SubmitRequest) -> Result<ReadingEvent, ServiceError> {
        if !(0..=MAX_SEVERITY as i64).contains(&req.severity) {
            return Err(ServiceError::SeverityOutOfRange(req.severity));
        }
        let handle = self.study(study)?;
        let mut s = handle.lock().expect("study lock");
        if !s.config.readers.iter().any(|r| r.id == req.reader) {
            return Err(ServiceError::UnknownReader(req.reader.clone()));
        }
        if s.image(&req.image).is_none() {
            return Err(ServiceError::UnknownImage(req.image.clone()));
        }
        let arms: Vec<Arm> = req.arm.map_or(Arm::ALL.to_vec(), |a| vec![a]);
        let open = arms.iter().find_map(|&arm| {
            s.sessions[&(req.reader.clone(), arm)]
                .open
                .as_ref()
                .filter(|o| o.image == req.image)
                .map(|o| (arm, o.displayed_at))
        });
        let Some((arm, displayed_at)) = open else {
            if let Some(&arm) = arms
                .iter()
                .find(|&&a| s.answered.contains(&(req.reader.clone(), req.image.clone(), a)))
            {
                return Err(ServiceError::DuplicateSubmission {
                    reader: req.reader.clone(),
                    image: req.image.clone(),
                    arm,
                });
            }
            return Err(ServiceError::NoOpenIssuance {
                reader: req.reader.clone(),
                image: req.image.clone(),
            });
        };
        let submitted_at = self.now().max(displayed_at + Duration::milliseconds(MIN_DURATION_MS));
        let event = ReadingEvent {
            study: study.to_string(),
            reader: req.reader.clone(),
            image: req.image.clone(),
            arm,
            severity: req.severity as u8,
            displayed_at,
            submitted_at,
            duration_s: duration_between(&displayed_at, &submitted_at),
            report_shown: arm == Arm::Assisted,
        };
        if let Some(meta) = &req.client_metadata {
            tracing::debug!(study, reader = %req.reader, image = %req.image, %meta, "client metadata");
        }
        s.record(JournalRecord::Reading { event: event.clone() })?;
        Ok(event)
    }

    pub fn events(&self, study: &str) -> Result<Vec<ReadingEvent>, ServiceError> {
        let s = self.study(study)?;
        let s = s.lock().expect("study lock");
        Ok(s.events.clone())
    }

    /// Event table in journal order; identical bytes until a new event arrives.
    pub fn export_events(&self, study: &str) -> Result<Arc<String>, ServiceError> {
        let handle = self.study(study)?;
        let mut s = handle.lock().expect("study lock");
        if s.export.is_none() {
            s.export = Some(Arc::new(events_to_csv(&s.events)));
        }
        Ok(s.export.clone().expect("just set"))
    }

    /// Studies whose image list contains `image`, in id order.
    fn studies_with_image(&self, image: &str, study: Option<&str>) -> Result<Vec<Arc<Mutex<Study>>>, ServiceError> {
        let found: Vec<_> = match study {
            Some(id) => vec![self.study(id)?],
            None => self.studies.read().expect("study map lock").values().cloned().collect(),
        };
        let found: Vec<_> = found
            .into_iter()
            .filter(|h| h.lock().expect("study lock").image(image).is_some())
            .collect();
        if found.is_empty() {
            return Err(ServiceError::UnknownImage(image.to_string()));
        }
        Ok(found)
    }

    /// Decoded pixels for an image. Relative DICOM paths resolve against the data directory.
    pub fn image_pixels(&self, image: &str, study: Option<&str>) -> Result<DicomImage, ServiceError> {
        let handle = self.studies_with_image(image, study)?.remove(0);
        let path = {
            let s = handle.lock().expect("study lock");
            s.image(image)
                .and_then(|i| i.dicom.clone())
                .ok_or_else(|| ServiceError::NoPixelData(image.to_string()))?
        };
        let path = if path.is_relative() {
            self.data_dir.join(path)
        } else {
            path
        };
        Ok(read_dicom(&path)?)
    }

    /// The AI report, only for a reader who has been issued the image in the assisted arm.
    pub fn image_report(&self, image: &str, study: &str, reader: &str) -> Result<AiReport, ServiceError> {
        let handle = self.study(study)?;
        let s = handle.lock().expect("study lock");
        if s.image(image).is_none() {
            return Err(ServiceError::UnknownImage(image.to_string()));
        }
        let sess = s
            .sessions
            .get(&(reader.to_string(), Arm::Assisted))
            .ok_or_else(|| ServiceError::UnknownReader(reader.to_string()))?;
        if !sess.sequence[..sess.issued].iter().any(|i| i == image) {
            return Err(ServiceError::ReportNotAvailable(image.to_string()));
        }
        s.report_for(image)
    }
}
