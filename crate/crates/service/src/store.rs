//! Append-only JSON-lines persistence for cases, the audit trail, pipeline
//! exceptions and committed enrollments.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use abis_core::MultiBiometricTemplate;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cases::{AdjudicationCase, CaseDecision};
use crate::error::ServiceError;

pub const CASES_FILE: &str = "cases.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const EXCEPTIONS_FILE: &str = "exceptions.jsonl";
pub const JOURNAL_FILE: &str = "enrollments.jsonl";
pub const SNAPSHOT_FILE: &str = "gallery.bgal";

pub fn encode_template(template: &MultiBiometricTemplate) -> String {
    B64.encode(template.to_bytes())
}

pub fn decode_template(text: &str) -> Result<MultiBiometricTemplate, ServiceError> {
    let bytes = B64
        .decode(text.trim())
        .map_err(|e| ServiceError::BadRequest(format!("template is not valid base64: {e}")))?;
    Ok(MultiBiometricTemplate::from_bytes(&bytes)?)
}

/// One line of the case log. A case is created once and decided at most
/// once; replay applies the lines in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum CaseEvent {
    Created { case: AdjudicationCase, template: String },
    Decided { case: AdjudicationCase },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub case_id: u64,
    pub decision: CaseDecision,
    pub adjudicator: String,
    pub timestamp: DateTime<Utc>,
    pub linked_gallery_id: Option<u64>,
    pub enrolled_gallery_id: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JournalRecord {
    pub gallery_id: u64,
    pub template: String,
}

/// An append-only JSON-lines file, or a sink when running in memory.
pub struct JsonlLog {
    out: Option<BufWriter<File>>,
}

impl JsonlLog {
    pub fn memory() -> Self {
        Self { out: None }
    }

    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: Some(BufWriter::new(file)),
        })
    }

    /// Writes and flushes one record.
    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), ServiceError> {
        if let Some(out) = self.out.as_mut() {
            serde_json::to_writer(&mut *out, record).map_err(|e| ServiceError::Storage(e.to_string()))?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        Ok(())
    }
}

/// Reads every record of a JSON-lines file; a missing file reads as empty.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ServiceError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| ServiceError::Storage(format!("{}:{}: {e}", path.display(), n + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// File locations under a state directory.
#[derive(Debug, Clone)]
pub struct StatePaths {
    pub dir: PathBuf,
}

impl StatePaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn cases(&self) -> PathBuf {
        self.dir.join(CASES_FILE)
    }

    pub fn audit(&self) -> PathBuf {
        self.dir.join(AUDIT_FILE)
    }

    pub fn exceptions(&self) -> PathBuf {
        self.dir.join(EXCEPTIONS_FILE)
    }

    pub fn journal(&self) -> PathBuf {
        self.dir.join(JOURNAL_FILE)
    }

    pub fn snapshot(&self) -> PathBuf {
        self.dir.join(SNAPSHOT_FILE)
    }
}
