//! Append-only event store and hash-chained audit log.
//!
//! Each line of the log file is one [`LogEntry`]: the domain [`EventRecord`]
//! and its [`AuditEvent`]. The audit hash covers the audit fields, and the
//! audit detail carries a digest of the record, so every byte of a line is
//! bound into the chain. Verification also requires each line to be in
//! canonical form, which catches edits that decode to the same value.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256, Sha512};

use crate::error::{Error, Result};
use crate::events::DomainEvent;
use crate::time::Timestamp;

pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigestAlgorithm {
    #[default]
    Sha256,
    Sha512,
}

impl DigestAlgorithm {
    pub fn digest_hex(self, bytes: &[u8]) -> String {
        match self {
            DigestAlgorithm::Sha256 => hex::encode(Sha256::digest(bytes)),
            DigestAlgorithm::Sha512 => hex::encode(Sha512::digest(bytes)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityRef {
    pub kind: String,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditEvent {
    pub seq: u64,
    pub at: Timestamp,
    pub actor: String,
    pub entity: EntityRef,
    pub action: String,
    pub detail: Value,
    pub prev_hash: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub seq: u64,
    pub stream: String,
    pub event: DomainEvent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogEntry {
    pub audit: AuditEvent,
    pub record: EventRecord,
}

impl LogEntry {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log entries serialize")
    }
}

#[derive(Serialize)]
struct HashInput<'a> {
    seq: u64,
    at: Timestamp,
    actor: &'a str,
    entity: &'a EntityRef,
    action: &'a str,
    detail: &'a Value,
    prev_hash: &'a str,
}

fn audit_hash(alg: DigestAlgorithm, a: &AuditEvent) -> String {
    let input = HashInput {
        seq: a.seq,
        at: a.at,
        actor: &a.actor,
        entity: &a.entity,
        action: &a.action,
        detail: &a.detail,
        prev_hash: &a.prev_hash,
    };
    alg.digest_hex(&serde_json::to_vec(&input).expect("hash input serializes"))
}

fn record_digest(alg: DigestAlgorithm, r: &EventRecord) -> String {
    alg.digest_hex(&serde_json::to_vec(r).expect("records serialize"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub seq: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub from_seq: u64,
    pub to_seq: u64,
    pub checked: u64,
    pub intact: bool,
    pub first_mismatch: Option<Mismatch>,
}

/// Checks `entries[i]` against its predecessor. `entries` must start at seq `base`.
fn check_entry(alg: DigestAlgorithm, entry: &LogEntry, expected_seq: u64, prev: Option<&LogEntry>) -> Option<String> {
    let a = &entry.audit;
    if a.seq != expected_seq || entry.record.seq != expected_seq {
        return Some(format!("seq {} / record seq {} where {expected_seq} expected", a.seq, entry.record.seq));
    }
    let expected_prev = prev.map_or(GENESIS_HASH, |p| p.audit.hash.as_str());
    if a.prev_hash != expected_prev {
        return Some("prev_hash does not match the preceding entry".into());
    }
    if let Some(p) = prev {
        if a.at < p.audit.at {
            return Some("timestamp moves backwards".into());
        }
    }
    let digest = a.detail.get("event_digest").and_then(Value::as_str);
    if digest != Some(record_digest(alg, &entry.record).as_str()) {
        return Some("event record digest mismatch".into());
    }
    if a.hash != audit_hash(alg, a) {
        return Some("audit hash mismatch".into());
    }
    None
}

fn verify_entries(alg: DigestAlgorithm, entries: &[LogEntry], from: u64, to: u64) -> VerificationReport {
    let mut report = VerificationReport { from_seq: from, to_seq: to, checked: 0, intact: true, first_mismatch: None };
    for seq in from..to {
        let i = seq as usize;
        let prev = i.checked_sub(1).map(|p| &entries[p]);
        report.checked += 1;
        if let Some(reason) = check_entry(alg, &entries[i], seq, prev) {
            report.intact = false;
            report.first_mismatch = Some(Mismatch { seq, reason });
            break;
        }
    }
    report
}

/// Result of decoding raw log bytes.
#[derive(Debug)]
pub struct LogRead {
    /// Every entry up to the first undecodable line.
    pub entries: Vec<LogEntry>,
    /// Set when a line failed to decode; `seq` is the first entry lost.
    pub corruption: Option<Error>,
}

/// Decodes log bytes. A line that fails to decode, is not in canonical form,
/// or lacks its trailing newline stops decoding.
pub fn read_log(bytes: &[u8]) -> LogRead {
    let mut entries = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        let seq = entries.len() as u64;
        let Some(nl) = rest.iter().position(|b| *b == b'\n') else {
            return LogRead {
                entries,
                corruption: Some(Error::CorruptLog { seq, reason: "torn final record".into() }),
            };
        };
        let line = &rest[..nl];
        rest = &rest[nl + 1..];
        let decoded = serde_json::from_slice::<LogEntry>(line)
            .map_err(|e| e.to_string())
            .and_then(|entry| {
                if entry.to_line().as_bytes() == line {
                    Ok(entry)
                } else {
                    Err("record is not in canonical form".to_string())
                }
            });
        match decoded {
            Ok(entry) => entries.push(entry),
            Err(reason) => {
                return LogRead { entries, corruption: Some(Error::CorruptLog { seq, reason }) };
            }
        }
    }
    LogRead { entries, corruption: None }
}

/// Decodes and verifies a whole log image.
pub fn verify_log_bytes(alg: DigestAlgorithm, bytes: &[u8]) -> VerificationReport {
    let read = read_log(bytes);
    let n = read.entries.len() as u64;
    let mut report = verify_entries(alg, &read.entries, 0, n);
    if report.intact {
        if let Some(Error::CorruptLog { seq, reason }) = read.corruption {
            report.intact = false;
            report.to_seq = seq + 1;
            report.checked += 1;
            report.first_mismatch = Some(Mismatch { seq, reason });
        }
    }
    report
}

enum Sink {
    Memory,
    File { writer: BufWriter<File>, fsync: bool, path: PathBuf },
}

/// The single append path for all service state.
pub struct Store {
    alg: DigestAlgorithm,
    entries: Vec<LogEntry>,
    sink: Sink,
    crash_at: Option<u64>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("alg", &self.alg)
            .field("len", &self.entries.len())
            .finish()
    }
}

impl Store {
    pub fn in_memory(alg: DigestAlgorithm) -> Self {
        Store { alg, entries: Vec::new(), sink: Sink::Memory, crash_at: None }
    }

    /// In-memory store holding already-verified entries.
    pub fn from_entries(alg: DigestAlgorithm, entries: Vec<LogEntry>) -> Result<Self> {
        let n = entries.len() as u64;
        let report = verify_entries(alg, &entries, 0, n);
        if let Some(m) = report.first_mismatch {
            return Err(Error::CorruptLog { seq: m.seq, reason: m.reason });
        }
        Ok(Store { alg, entries, sink: Sink::Memory, crash_at: None })
    }

    /// Opens (or creates) a file-backed log, verifying every entry. Any
    /// corruption, including a torn final record, is an error.
    pub fn open(path: impl AsRef<Path>, alg: DigestAlgorithm, fsync: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let read = read_log(&bytes);
        if let Some(err) = read.corruption {
            return Err(err);
        }
        let mut store = Store::from_entries(alg, read.entries)?;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        store.sink = Sink::File { writer: BufWriter::new(file), fsync, path };
        Ok(store)
    }

    pub fn algorithm(&self) -> DigestAlgorithm {
        self.alg
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.sink {
            Sink::File { path, .. } => Some(path),
            Sink::Memory => None,
        }
    }

    pub fn len(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tail_hash(&self) -> &str {
        self.entries.last().map_or(GENESIS_HASH, |e| e.audit.hash.as_str())
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    /// Simulated crash: the append that would produce seq `at` fails and
    /// nothing is written.
    pub fn arm_crash(&mut self, at: u64) {
        self.crash_at = Some(at);
    }

    /// Appends `record` with its audit event. The store assigns `seq`, adds
    /// the record digest to the audit detail and seals the hash; the caller's
    /// `prev_hash` must name the current tail.
    pub fn append(&mut self, mut record: EventRecord, mut audit: AuditEvent) -> Result<u64> {
        if audit.prev_hash != self.tail_hash() {
            return Err(Error::ChainMismatch { expected: self.tail_hash().to_string(), got: audit.prev_hash });
        }
        let seq = self.len();
        if self.crash_at == Some(seq) {
            return Err(Error::Crashed(seq));
        }
        if let Some(last) = self.entries.last() {
            audit.at = audit.at.max(last.audit.at);
        }
        record.seq = seq;
        audit.seq = seq;
        let mut detail = match audit.detail {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => Map::from_iter([("value".to_string(), other)]),
        };
        detail.insert("event_digest".into(), Value::String(record_digest(self.alg, &record)));
        audit.detail = Value::Object(detail);
        audit.hash = audit_hash(self.alg, &audit);
        let entry = LogEntry { audit, record };
        if let Sink::File { writer, fsync, .. } = &mut self.sink {
            let mut line = entry.to_line();
            line.push('\n');
            writer.write_all(line.as_bytes())?;
            writer.flush()?;
            if *fsync {
                writer.get_ref().sync_data()?;
            }
        }
        self.entries.push(entry);
        Ok(seq)
    }

    /// Records of one stream (or all), in log order.
    pub fn replay(&self, stream: Option<&str>) -> Vec<&EventRecord> {
        self.entries
            .iter()
            .map(|e| &e.record)
            .filter(|r| stream.is_none_or(|s| r.stream == s))
            .collect()
    }

    pub fn verify_chain(&self, from_seq: u64, to_seq: u64) -> Result<VerificationReport> {
        if from_seq > to_seq || to_seq > self.len() {
            return Err(Error::RangeOutOfBounds { from: from_seq, to: to_seq, len: self.len() });
        }
        Ok(verify_entries(self.alg, &self.entries, from_seq, to_seq))
    }

    pub fn verify_all(&self) -> VerificationReport {
        verify_entries(self.alg, &self.entries, 0, self.len())
    }

    /// The log image exactly as written to disk.
    pub fn log_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend_from_slice(e.to_line().as_bytes());
            out.push(b'\n');
        }
        out
    }
}

/// Full-state snapshot covering the first `seq` log entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot<S> {
    pub seq: u64,
    pub tail_hash: String,
    pub state: S,
}

impl<S: Serialize + serde::de::DeserializeOwned> Snapshot<S> {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self).map_err(|e| Error::Io(e.to_string()))?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Option<Self>> {
        match std::fs::read(path.as_ref()) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| Error::Io(format!("snapshot decode: {e}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}
