//! Append-only study journal: one JSON record per line, fsynced per append.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use cxr_core::evalkit::{Arm, ReadingEvent};
use serde::{Deserialize, Serialize};

use crate::config::StudyConfig;
use crate::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JournalRecord {
    Created {
        at: DateTime<Utc>,
        config: StudyConfig,
    },
    Issued {
        reader: String,
        arm: Arm,
        image: String,
        displayed_at: DateTime<Utc>,
    },
    Reading {
        event: ReadingEvent,
    },
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> ServiceError + '_ {
    move |e| ServiceError::Io(path.display().to_string(), e)
}

impl Journal {
    /// Creates a new journal; fails if the file exists.
    pub fn create(path: &Path, first: &JournalRecord) -> Result<Self, ServiceError> {
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(path)
            .map_err(io(path))?;
        let mut j = Self {
            path: path.to_path_buf(),
            file,
        };
        j.append(first)?;
        if let Some(dir) = path.parent() {
            // make the new directory entry durable too
            File::open(dir).and_then(|d| d.sync_all()).map_err(io(dir))?;
        }
        Ok(j)
    }

    /// Reads all complete records. A torn final line (a write interrupted
    /// before its fsync, hence never acknowledged) is cut off the file.
    pub fn open(path: &Path) -> Result<(Self, Vec<JournalRecord>), ServiceError> {
        let bytes = fs::read(path).map_err(io(path))?;
        let mut records = vec![];
        let mut good_len = 0;
        for line in bytes.split_inclusive(|&b| b == b'\n') {
            if !line.ends_with(b"\n") {
                break;
            }
            match serde_json::from_slice::<JournalRecord>(line) {
                Ok(r) => {
                    records.push(r);
                    good_len += line.len();
                }
                Err(e) => {
                    let complete_after = bytes[good_len + line.len()..].contains(&b'\n');
                    if complete_after {
                        return Err(ServiceError::Corrupt(format!(
                            "{}: record at byte {good_len}: {e}",
                            path.display()
                        )));
                    }
                    break;
                }
            }
        }
        let file = OpenOptions::new().append(true).open(path).map_err(io(path))?;
        if good_len < bytes.len() {
            tracing::warn!(path = %path.display(), dropped = bytes.len() - good_len, "truncating torn journal tail");
            file.set_len(good_len as u64).map_err(io(path))?;
            file.sync_all().map_err(io(path))?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            records,
        ))
    }

    /// Appends one record and waits for it to reach stable storage.
    pub fn append(&mut self, record: &JournalRecord) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(record).expect("journal records serialize");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io(&self.path))?;
        self.file.sync_data().map_err(io(&self.path))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
