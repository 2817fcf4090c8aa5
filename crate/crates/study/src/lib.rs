//! Reader-study service: two-arm reading sessions with wash-out, AI report
//! delivery in the assisted arm, server-side timing and a durable journal.

pub mod clock;
pub mod config;
pub mod dicom;
pub mod http;
pub mod journal;
pub mod report;
pub mod service;
pub mod simulate;

use chrono::{DateTime, Utc};
use cxr_core::evalkit::Arm;
use thiserror::Error;

pub use clock::{Clock, ManualClock, SystemClock};
pub use config::{ReaderInfo, StudyConfig, StudyImage};
pub use report::{build_ai_report, AiReport, ModelOutput};
pub use service::{NextItem, StudyService, SubmitRequest};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown study `{0}`")]
    UnknownStudy(String),
    #[error("study `{0}` already exists")]
    DuplicateStudy(String),
    #[error("invalid study config: {0}")]
    InvalidConfig(String),
    #[error("reader `{0}` is not enrolled in this study")]
    UnknownReader(String),
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("{}", match .unlock_at {
        Some(t) => format!("assisted arm is locked until {}", cxr_core::evalkit::format_timestamp(t)),
        None => "assisted arm is locked until the blind arm is complete".to_string(),
    })]
    ArmLocked { unlock_at: Option<DateTime<Utc>> },
    #[error("severity {0} outside [0, 18]")]
    SeverityOutOfRange(i64),
    #[error("no open issuance of image `{image}` for reader `{reader}`")]
    NoOpenIssuance { reader: String, image: String },
    #[error("reading of image `{image}` by `{reader}` in the {arm} arm already stored")]
    DuplicateSubmission { reader: String, image: String, arm: Arm },
    #[error("no AI report available for image `{0}` to this reader")]
    ReportNotAvailable(String),
    #[error("image `{0}` has no pixel data")]
    NoPixelData(String),
    #[error(transparent)]
    Dicom(#[from] dicom::DicomError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
    #[error("journal corrupt: {0}")]
    Corrupt(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}
