//! Hash-chained accountability log.
//!
//! Each [`EventRecord`] binds an actor to an event and chains to its
//! predecessor through a SHA-256 digest over a length-prefixed canonical
//! byte layout:
//!
//! ```text
//! seq (u64 BE) | len(actor) actor | len(type) type | len(payload) payload | prev digest (32 bytes)
//! ```
//!
//! Lengths are u64 big-endian. The payload is canonical JSON (object keys
//! sorted, no insignificant whitespace). The first record chains to
//! [`GENESIS_DIGEST`], 32 zero bytes. Truncating the tail of a log cannot
//! be detected from the log alone; compare against an externally stored
//! head digest with [`verify_log_with_head`].

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const GENESIS_DIGEST: [u8; 32] = [0u8; 32];

/// Event type tags used across the crate.
pub mod kinds {
    pub const RUN_STARTED: &str = "run_started";
    pub const GUARD_INPUT: &str = "guard_input";
    pub const GUARD_OUTPUT: &str = "guard_output";
    pub const GOAL_CREATED: &str = "goal_created";
    pub const NOTIFICATION: &str = "context_notification";
    pub const CONTEXT_RETRIEVED: &str = "context_retrieved";
    pub const PROMPT_OPTIMISED: &str = "prompt_optimised";
    pub const MODEL_CALL: &str = "model_call";
    pub const PLAN_GENERATED: &str = "plan_generated";
    pub const TREE_GENERATED: &str = "tree_generated";
    pub const CHOICE_REQUESTED: &str = "choice_requested";
    pub const BRANCH_CHOSEN: &str = "branch_chosen";
    pub const REFLECTION: &str = "reflection";
    pub const FEEDBACK_REQUEST: &str = "feedback_request";
    pub const FEEDBACK_POSTED: &str = "feedback_posted";
    pub const PLAN_REVISED: &str = "plan_revised";
    pub const PLAN_APPROVED: &str = "plan_approved";
    pub const VOTE_OPENED: &str = "vote_opened";
    pub const BALLOT: &str = "ballot";
    pub const ABSTENTION: &str = "abstention";
    pub const VOTE_RESULT: &str = "vote_result";
    pub const DEBATE_OPENED: &str = "debate_opened";
    pub const DEBATE_STATEMENT: &str = "debate_statement";
    pub const DEBATE_RESULT: &str = "debate_result";
    pub const WORKFLOW_PLAN: &str = "workflow_plan";
    pub const ASSIGNMENT: &str = "assignment";
    pub const SPAWN: &str = "spawn";
    pub const STEP_RESULT: &str = "step_result";
    pub const TOOL_INVOCATION: &str = "tool_invocation";
    pub const RESPONSE_OPTIMISED: &str = "response_optimised";
    pub const RUN_COMPLETED: &str = "run_completed";
    pub const RUN_FAILED: &str = "run_failed";
    pub const RUN_ABORTED: &str = "run_aborted";
    pub const RUN_SUSPENDED: &str = "run_suspended";
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub seq: u64,
    pub actor_id: String,
    pub event_type: String,
    /// Canonical JSON text.
    pub payload: String,
    /// Lower-case hex SHA-256.
    pub digest: String,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    seq: u64,
    actor_id: String,
    event_type: String,
    payload: Value,
    digest: String,
}

impl EventRecord {
    pub fn payload_value(&self) -> Value {
        serde_json::from_str(&self.payload).unwrap_or(Value::Null)
    }

    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "seq": self.seq,
            "actor_id": self.actor_id,
            "event_type": self.event_type,
            "payload": self.payload_value(),
            "digest": self.digest,
        })
    }
}

impl Serialize for EventRecord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        WireRecord {
            seq: self.seq,
            actor_id: self.actor_id.clone(),
            event_type: self.event_type.clone(),
            payload: self.payload_value(),
            digest: self.digest.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EventRecord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = WireRecord::deserialize(d)?;
        Ok(EventRecord {
            seq: w.seq,
            actor_id: w.actor_id,
            event_type: w.event_type,
            payload: canonical_json(&w.payload),
            digest: w.digest,
        })
    }
}

/// Canonical JSON text for a value: sorted keys, compact.
pub fn canonical_json(value: &Value) -> String {
    // serde_json's default map is ordered by key.
    serde_json::to_string(value).expect("json values always serialize")
}

fn push_field(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_be_bytes());
    buf.extend_from_slice(bytes);
}

/// Digest of one record given its predecessor's digest.
pub fn chain_digest(seq: u64, actor_id: &str, event_type: &str, payload: &str, prev: &[u8; 32]) -> [u8; 32] {
    let mut buf = Vec::with_capacity(64 + actor_id.len() + event_type.len() + payload.len());
    buf.extend_from_slice(&seq.to_be_bytes());
    push_field(&mut buf, actor_id.as_bytes());
    push_field(&mut buf, event_type.as_bytes());
    push_field(&mut buf, payload.as_bytes());
    buf.extend_from_slice(prev);
    Sha256::digest(&buf).into()
}

fn decode_digest(hex_digest: &str) -> Option<[u8; 32]> {
    let bytes = hex::decode(hex_digest).ok()?;
    bytes.try_into().ok()
}

/// Append-only, totally ordered event log. One writer at a time.
#[derive(Debug, Default)]
pub struct EventLog {
    records: Mutex<Vec<EventRecord>>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Continues an existing (already verified) chain.
    pub fn from_records(records: Vec<EventRecord>) -> Self {
        Self {
            records: Mutex::new(records),
        }
    }

    pub fn append<P: Serialize>(&self, actor_id: &str, event_type: &str, payload: &P) -> EventRecord {
        let value = serde_json::to_value(payload).expect("event payloads serialize");
        let payload = canonical_json(&value);
        let mut records = self.records.lock().expect("event log poisoned");
        let prev = records
            .last()
            .and_then(|r| decode_digest(&r.digest))
            .unwrap_or(GENESIS_DIGEST);
        let seq = records.len() as u64 + 1;
        let digest = chain_digest(seq, actor_id, event_type, &payload, &prev);
        let record = EventRecord {
            seq,
            actor_id: actor_id.to_string(),
            event_type: event_type.to_string(),
            payload,
            digest: hex::encode(digest),
        };
        records.push(record.clone());
        record
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("event log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<EventRecord> {
        self.records.lock().expect("event log poisoned").clone()
    }

    /// Records with `seq >= from`.
    pub fn since(&self, from: u64) -> Vec<EventRecord> {
        self.records
            .lock()
            .expect("event log poisoned")
            .iter()
            .filter(|r| r.seq >= from)
            .cloned()
            .collect()
    }

    pub fn last_seq(&self) -> u64 {
        self.len() as u64
    }

    pub fn head_digest(&self) -> String {
        self.records
            .lock()
            .expect("event log poisoned")
            .last()
            .map(|r| r.digest.clone())
            .unwrap_or_else(|| hex::encode(GENESIS_DIGEST))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), AuditError> {
        write_jsonl(path, &self.records())
    }
}

pub fn write_jsonl(path: &Path, records: &[EventRecord]) -> Result<(), AuditError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EventRecord>, AuditError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EventRecord = serde_json::from_str(&line).map_err(|e| AuditError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LogVerdict {
    Intact,
    Broken { first_bad_seq: u64 },
}

/// Recomputes the chain and reports the first record that does not verify.
pub fn verify_log(records: &[EventRecord]) -> LogVerdict {
    let mut prev = GENESIS_DIGEST;
    for (idx, r) in records.iter().enumerate() {
        let expected_seq = idx as u64 + 1;
        let digest = chain_digest(r.seq, &r.actor_id, &r.event_type, &r.payload, &prev);
        if r.seq != expected_seq || decode_digest(&r.digest) != Some(digest) {
            return LogVerdict::Broken {
                first_bad_seq: expected_seq,
            };
        }
        prev = digest;
    }
    LogVerdict::Intact
}

/// As [`verify_log`], additionally requiring the chain to end at `head`.
/// A truncated tail is reported at the first missing sequence number.
pub fn verify_log_with_head(records: &[EventRecord], head: &str) -> LogVerdict {
    match verify_log(records) {
        LogVerdict::Intact => {
            let actual = records
                .last()
                .map(|r| r.digest.clone())
                .unwrap_or_else(|| hex::encode(GENESIS_DIGEST));
            if actual == head {
                LogVerdict::Intact
            } else {
                LogVerdict::Broken {
                    first_bad_seq: records.len() as u64 + 1,
                }
            }
        }
        broken => broken,
    }
}
