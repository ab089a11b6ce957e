//! Append-only JSON-lines ledger of annotation events.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::AnnotateError;
use vulnforge_core::model::{GradeRecord, StudyRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LedgerEvent {
    Label {
        id: String,
        annotator_id: String,
        summary: String,
        extractive_ratio: f64,
        at: DateTime<Utc>,
    },
    Grades {
        id: String,
        record: GradeRecord,
    },
    Study {
        id: String,
        record: StudyRecord,
    },
}

impl LedgerEvent {
    pub fn id(&self) -> &str {
        match self {
            LedgerEvent::Label { id, .. } | LedgerEvent::Grades { id, .. } | LedgerEvent::Study { id, .. } => id,
        }
    }
}

#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    file: File,
}

impl Ledger {
    /// Opens (creating if needed) for appending.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, AnnotateError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Ledger { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one line and syncs it before returning.
    pub fn append(&mut self, event: &LedgerEvent) -> Result<(), AnnotateError> {
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// Reads every event in order. A torn final line (no trailing newline, not
/// parseable) is what a crash mid-append leaves behind, so it is skipped with
/// a warning; any other bad line is an error.
pub fn replay(path: impl AsRef<Path>) -> Result<Vec<LedgerEvent>, AnnotateError> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        let text = buf.trim();
        if text.is_empty() {
            continue;
        }
        match serde_json::from_str(text) {
            Ok(e) => events.push(e),
            Err(_) if !complete => {
                log::warn!("{}: ignoring torn final line {line_no}", path.display());
            }
            Err(source) => {
                return Err(AnnotateError::Corrupt { line: line_no, source });
            }
        }
    }
    Ok(events)
}
