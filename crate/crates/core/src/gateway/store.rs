use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{ExchangeRecord, ExchangeStatus, GatewayError};

/// Append-only JSONL store of exchanges, keyed by cache key.
///
/// When a key appears on several lines the last one wins, so a retried
/// exchange simply appends its new outcome.
#[derive(Debug)]
pub struct ReplayStore {
    path: PathBuf,
    records: HashMap<String, ExchangeRecord>,
    writer: Option<BufWriter<File>>,
}

impl ReplayStore {
    /// Opens `path`, loading any existing records. A missing file is an
    /// empty store; it is created on first append.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let path = path.into();
        let mut records = HashMap::new();
        match File::open(&path) {
            Ok(file) => {
                for (i, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(|source| GatewayError::Io {
                        path: path.clone(),
                        source,
                    })?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let rec: ExchangeRecord = serde_json::from_str(&line).map_err(|source| GatewayError::Store {
                        path: path.clone(),
                        line: i + 1,
                        source,
                    })?;
                    records.insert(rec.cache_key.clone(), rec);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(source) => return Err(GatewayError::Io { path, source }),
        }
        Ok(Self {
            path,
            records,
            writer: None,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&ExchangeRecord> {
        self.records.get(key)
    }

    /// A record is resolved unless its last outcome was a transport error.
    pub fn resolved(&self, key: &str) -> Option<&ExchangeRecord> {
        self.get(key).filter(|r| r.status != ExchangeStatus::TransportError)
    }

    pub fn append(&mut self, record: ExchangeRecord) -> Result<(), GatewayError> {
        let io = |source| GatewayError::Io {
            path: self.path.clone(),
            source,
        };
        if self.writer.is_none() {
            let file = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io)?;
            self.writer = Some(BufWriter::new(file));
        }
        let w = self.writer.as_mut().expect("writer opened above");
        let line = serde_json::to_string(&record).expect("records serialize");
        writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|source| GatewayError::Io {
            path: self.path.clone(),
            source,
        })?;
        self.records.insert(record.cache_key.clone(), record);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DecodingParams;

    fn record(key: &str, status: ExchangeStatus, text: &str) -> ExchangeRecord {
        ExchangeRecord {
            cache_key: key.into(),
            provider_id: "p".into(),
            model: "m".into(),
            prompt_text: "prompt".into(),
            decoding: DecodingParams::default(),
            rep_index: 0,
            response_text: text.into(),
            status,
            reason: None,
            timestamp: chrono::DateTime::UNIX_EPOCH,
            attempt: 1,
        }
    }

    #[test]
    fn last_line_wins_and_errors_stay_unresolved() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut store = ReplayStore::open(&path).unwrap();
        assert!(store.is_empty());
        store.append(record("a", ExchangeStatus::TransportError, "")).unwrap();
        store.append(record("b", ExchangeStatus::Ok, "1. x")).unwrap();
        assert!(store.resolved("a").is_none());
        store.append(record("a", ExchangeStatus::Ok, "1. y")).unwrap();
        drop(store);

        let store = ReplayStore::open(&path).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.resolved("a").unwrap().response_text, "1. y");
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
    }

    #[test]
    fn corrupt_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        std::fs::write(&path, "\n{not json}\n").unwrap();
        let err = ReplayStore::open(&path).unwrap_err();
        assert!(matches!(err, GatewayError::Store { line: 2, .. }));
    }
}
