//! Append-only audit log, one JSON object per line.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use chrono::{SecondsFormat, Utc};
use ric_core::InterruptionRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One injection. Field names are part of the log format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    /// UTC, millisecond precision.
    pub ts: String,
    pub conv: String,
    pub id: u64,
    pub off: u64,
    pub digest: String,
    pub mode: String,
    /// Measured system share after the injection.
    pub ratio: f64,
}

impl AuditEntry {
    pub fn new(conv: &str, record: &InterruptionRecord, policy_version: &str, ratio: f64) -> Self {
        AuditEntry {
            ts: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            conv: conv.to_owned(),
            id: record.id,
            off: record.offset_tokens.get(),
            digest: text_digest(policy_version, &record.text),
            mode: record.mode.as_str().to_owned(),
            ratio,
        }
    }
}

/// `<policy version>:<first 16 hex digits of sha256(text)>`
pub fn text_digest(policy_version: &str, text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    format!("{policy_version}:{}", hex::encode(&hash[..8]))
}

pub struct AuditLog {
    file: Option<Mutex<File>>,
    written: AtomicU64,
}

impl AuditLog {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog {
            file: Some(Mutex::new(file)),
            written: AtomicU64::new(0),
        })
    }

    /// Counts entries without persisting them.
    pub fn discard() -> Self {
        AuditLog {
            file: None,
            written: AtomicU64::new(0),
        }
    }

    pub fn append(&self, entry: &AuditEntry) -> io::Result<()> {
        if let Some(file) = &self.file {
            let mut line = serde_json::to_vec(entry)?;
            line.push(b'\n');
            let mut file = file.lock().unwrap_or_else(|e| e.into_inner());
            file.write_all(&line)?;
        }
        self.written.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn entries_written(&self) -> u64 {
        self.written.load(Ordering::Relaxed)
    }
}

pub fn read_entries(path: &Path) -> io::Result<Vec<AuditEntry>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(io::Error::other))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ric_core::{RecordMode, TokenCount};

    fn record(id: u64) -> InterruptionRecord {
        InterruptionRecord {
            id,
            offset_tokens: TokenCount::new(id * 10),
            text: "secret reminder".into(),
            mode: RecordMode::Cot,
            message_index: None,
        }
    }

    #[test]
    fn writes_one_line_per_entry_with_exact_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let log = AuditLog::open(&path).unwrap();
        for id in 1..=3 {
            log.append(&AuditEntry::new("c1", &record(id), "abc", 0.25)).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, vec!["conv", "digest", "id", "mode", "off", "ratio", "ts"]);
        assert!(!text.contains("secret reminder"));
        let entries = read_entries(&path).unwrap();
        assert_eq!(entries[2].id, 3);
        assert_eq!(entries[2].off, 30);
        assert_eq!(entries[0].mode, "cot");
        assert!(entries[0].ts.ends_with('Z'));
        assert_eq!(log.entries_written(), 3);
    }

    #[test]
    fn reopening_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        AuditLog::open(&path).unwrap().append(&AuditEntry::new("c", &record(1), "v", 0.0)).unwrap();
        AuditLog::open(&path).unwrap().append(&AuditEntry::new("c", &record(2), "v", 0.0)).unwrap();
        assert_eq!(read_entries(&path).unwrap().len(), 2);
    }

    #[test]
    fn digest_is_keyed_by_policy_version() {
        assert_ne!(text_digest("a", "x"), text_digest("b", "x"));
        assert_eq!(text_digest("a", "x"), text_digest("a", "x"));
        assert!(text_digest("v1", "x").starts_with("v1:"));
    }
}
