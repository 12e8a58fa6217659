use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::BackendError;

/// One line of the newline-delimited audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub event: String,
    pub endpoint: String,
    pub request_id: String,
    pub attempt: u32,
    pub payload: serde_json::Value,
}

impl AuditEntry {
    pub fn request(endpoint: &str, id: &str, attempt: u32, payload: serde_json::Value) -> Self {
        Self::new("request", endpoint, id, attempt, payload)
    }

    pub fn response(endpoint: &str, id: &str, attempt: u32, payload: serde_json::Value) -> Self {
        Self::new("response", endpoint, id, attempt, payload)
    }

    pub fn error(endpoint: &str, id: &str, attempt: u32, err: &BackendError) -> Self {
        Self::new("error", endpoint, id, attempt, serde_json::Value::String(err.to_string()))
    }

    fn new(event: &str, endpoint: &str, id: &str, attempt: u32, payload: serde_json::Value) -> Self {
        Self {
            event: event.into(),
            endpoint: endpoint.into(),
            request_id: id.into(),
            attempt,
            payload,
        }
    }
}

enum Sink {
    Memory(Vec<AuditEntry>),
    File(BufWriter<File>),
}

/// Append-only request/response log, shared by every backend call.
pub struct AuditLog {
    sink: Mutex<Sink>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self {
            sink: Mutex::new(Sink::Memory(Vec::new())),
        }
    }

    /// Appends to `path`, creating it if needed.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            sink: Mutex::new(Sink::File(BufWriter::new(file))),
        })
    }

    pub fn append(&self, entry: &AuditEntry) {
        let mut sink = self.sink.lock().unwrap();
        match &mut *sink {
            Sink::Memory(entries) => entries.push(entry.clone()),
            Sink::File(w) => {
                let line = serde_json::to_string(entry).expect("audit entry serializes");
                if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                    log::error!("failed to append audit entry: {e}");
                }
            }
        }
    }

    /// Entries recorded so far; empty for file-backed logs.
    pub fn entries(&self) -> Vec<AuditEntry> {
        match &*self.sink.lock().unwrap() {
            Sink::Memory(entries) => entries.clone(),
            Sink::File(_) => Vec::new(),
        }
    }

    pub fn read_file(path: &Path) -> std::io::Result<Vec<AuditEntry>> {
        std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
            .collect()
    }
}
