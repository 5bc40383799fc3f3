//! Append-only NDJSON event log with snapshots and replay.
//!
//! Layout under a data directory:
//!
//! - `events.ndjson`: one [`Event`] per line
//! - `snapshot-<seq>.json`: a [`Snapshot`] of the state after event `seq`

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{
    ActivityCluster, ComplianceReport, EmotionReport, Plan, UserProfile, UserType,
};
use crate::ids::{ChatId, NotificationId, PlanId, UserId};
use crate::iml::{ImlConfig, LabeledInstance, ModelKind};
use crate::scheduling::ScheduledNotification;
use crate::state::{ApplyError, State};

pub const SCHEMA_VERSION: u32 = 1;
pub const EVENTS_FILE: &str = "events.ndjson";

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("storage failure: {0}")]
    StorageFailure(#[from] std::io::Error),
    #[error("invalid payload: {0}")]
    PayloadInvalid(#[from] ApplyError),
    #[error("corrupt log line at seq {seq}: {message}")]
    CorruptLine { seq: u64, message: String },
    #[error("schema version {found} does not match {expected}")]
    VersionMismatch { found: u32, expected: u32 },
}

impl PersistError {
    pub fn code(&self) -> &'static str {
        match self {
            PersistError::StorageFailure(_) => "StorageFailure",
            PersistError::PayloadInvalid(_) => "PayloadInvalid",
            PersistError::CorruptLine { .. } => "CorruptLine",
            PersistError::VersionMismatch { .. } => "VersionMismatch",
        }
    }
}

/// Kind-specific event payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    UserRegistered {
        profile: UserProfile,
        chat_id: ChatId,
        suggested_template: String,
    },
    PlanAssigned {
        plan: Plan,
    },
    PlanRefined {
        user_id: UserId,
        previous_plan: PlanId,
        refined_template: String,
        as_of: NaiveDate,
        compliance_score: Option<f64>,
        observed_type: UserType,
    },
    ComplianceReported {
        report: ComplianceReport,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        chat_id: Option<ChatId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        update_id: Option<u64>,
    },
    EmotionReported {
        report: EmotionReport,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        chat_id: Option<ChatId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        update_id: Option<u64>,
    },
    NotificationScheduled {
        plan_id: PlanId,
        notifications: Vec<ScheduledNotification>,
    },
    NotificationDispatched {
        notification_id: NotificationId,
    },
    NotificationExpired {
        notification_id: NotificationId,
    },
    ClusterConfirmed {
        clusters: Vec<ActivityCluster>,
    },
    BroadcastSent {
        text: String,
        filter: String,
        recipients: Vec<UserId>,
    },
    ModelLabelAdded {
        model: ModelKind,
        instance: LabeledInstance,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::UserRegistered { .. } => "UserRegistered",
            EventBody::PlanAssigned { .. } => "PlanAssigned",
            EventBody::PlanRefined { .. } => "PlanRefined",
            EventBody::ComplianceReported { .. } => "ComplianceReported",
            EventBody::EmotionReported { .. } => "EmotionReported",
            EventBody::NotificationScheduled { .. } => "NotificationScheduled",
            EventBody::NotificationDispatched { .. } => "NotificationDispatched",
            EventBody::NotificationExpired { .. } => "NotificationExpired",
            EventBody::ClusterConfirmed { .. } => "ClusterConfirmed",
            EventBody::BroadcastSent { .. } => "BroadcastSent",
            EventBody::ModelLabelAdded { .. } => "ModelLabelAdded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub schema_version: u32,
    pub seq: u64,
    pub ts: DateTime<Utc>,
    #[serde(flatten)]
    pub body: EventBody,
}

impl Event {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

enum Sink {
    Memory(Vec<String>),
    File {
        path: PathBuf,
        writer: BufWriter<File>,
        sync_every_append: bool,
    },
}

/// The single writer. Validation against the current state happens in
/// [`EventLog::append`] before anything is written.
pub struct EventLog {
    sink: Sink,
    last_seq: u64,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let sink = match &self.sink {
            Sink::Memory(_) => "memory".to_string(),
            Sink::File { path, .. } => path.display().to_string(),
        };
        f.debug_struct("EventLog")
            .field("sink", &sink)
            .field("last_seq", &self.last_seq)
            .finish()
    }
}

impl EventLog {
    /// A log kept only in memory.
    pub fn in_memory() -> Self {
        EventLog {
            sink: Sink::Memory(Vec::new()),
            last_seq: 0,
        }
    }

    /// Opens `data_dir/events.ndjson` for appending after `last_seq`, which
    /// must be the seq of the last intact line (see [`open_data_dir`]).
    fn open_file(
        path: PathBuf,
        last_seq: u64,
        sync_every_append: bool,
    ) -> Result<Self, PersistError> {
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(EventLog {
            sink: Sink::File {
                path,
                writer: BufWriter::new(file),
                sync_every_append,
            },
            last_seq,
        })
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Lines written so far when the log lives in memory.
    pub fn memory_lines(&self) -> Option<&[String]> {
        match &self.sink {
            Sink::Memory(lines) => Some(lines),
            Sink::File { .. } => None,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.sink {
            Sink::Memory(_) => None,
            Sink::File { path, .. } => Some(path),
        }
    }

    /// Validates `body` against `state`, writes it, then applies it.
    /// On error neither the log nor the state changes.
    pub fn append(
        &mut self,
        state: &mut State,
        ts: DateTime<Utc>,
        body: EventBody,
    ) -> Result<u64, PersistError> {
        state.check(&body)?;
        let event = Event {
            schema_version: SCHEMA_VERSION,
            seq: self.last_seq + 1,
            ts,
            body,
        };
        let mut line = event.to_line();
        match &mut self.sink {
            Sink::Memory(lines) => lines.push(line),
            Sink::File {
                writer,
                sync_every_append,
                ..
            } => {
                line.push('\n');
                writer.write_all(line.as_bytes())?;
                if *sync_every_append {
                    writer.flush()?;
                    writer.get_ref().sync_data()?;
                }
            }
        }
        self.last_seq = event.seq;
        state.apply(event.seq, event.ts, event.body);
        Ok(self.last_seq)
    }

    pub fn flush(&mut self) -> Result<(), PersistError> {
        if let Sink::File { writer, .. } = &mut self.sink {
            writer.flush()?;
            writer.get_ref().sync_data()?;
        }
        Ok(())
    }
}

impl Drop for EventLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

fn parse_line(line: &str, expected_seq: u64) -> Result<Event, PersistError> {
    let corrupt = |message: String| PersistError::CorruptLine {
        seq: expected_seq,
        message,
    };
    let event: Event = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
    if event.schema_version != SCHEMA_VERSION {
        return Err(PersistError::VersionMismatch {
            found: event.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    if event.seq != expected_seq {
        return Err(corrupt(format!("found seq {}", event.seq)));
    }
    Ok(event)
}

/// Result of a tolerant replay: the state after the last intact event and
/// the error that stopped it, if any.
#[derive(Debug)]
pub struct Recovered {
    pub state: State,
    pub error: Option<PersistError>,
    /// Byte length of the intact prefix.
    pub valid_bytes: usize,
}

/// Applies log lines on top of `state`, stopping at the first bad line.
pub fn replay_onto(mut state: State, log: &str) -> Recovered {
    let mut valid_bytes = 0;
    let mut rest = log;
    while !rest.is_empty() {
        let (line, consumed) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1),
            // a line without its newline was cut short by a crash
            None => (rest, rest.len()),
        };
        let expected = state.last_seq + 1;
        let terminated = consumed > line.len();
        let outcome = if !terminated {
            Err(PersistError::CorruptLine {
                seq: expected,
                message: "unterminated last line".into(),
            })
        } else {
            parse_line(line, expected).and_then(|event| {
                state.check(&event.body)?;
                Ok(event)
            })
        };
        match outcome {
            Ok(event) => state.apply(event.seq, event.ts, event.body),
            Err(error) => {
                return Recovered {
                    state,
                    error: Some(error),
                    valid_bytes,
                }
            }
        }
        valid_bytes += consumed;
        rest = &rest[consumed..];
    }
    Recovered {
        state,
        error: None,
        valid_bytes,
    }
}

/// Rebuilds state from a complete log.
pub fn replay(log: &str, iml: &ImlConfig) -> Result<State, PersistError> {
    let recovered = replay_onto(State::new(iml)?, log);
    match recovered.error {
        None => Ok(recovered.state),
        Some(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema_version: u32,
    pub as_of_seq: u64,
    pub state: State,
}

pub fn snapshot(state: &State) -> Snapshot {
    Snapshot {
        schema_version: SCHEMA_VERSION,
        as_of_seq: state.last_seq,
        state: state.clone(),
    }
}

/// Restores a snapshot and applies the events after it. `tail` may be the
/// whole log; events at or before the snapshot are skipped.
pub fn load(snapshot_json: &str, tail: &str) -> Result<State, PersistError> {
    #[derive(Deserialize)]
    struct Header {
        schema_version: u32,
    }
    let header: Header =
        serde_json::from_str(snapshot_json).map_err(|e| PersistError::CorruptLine {
            seq: 0,
            message: format!("snapshot: {e}"),
        })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(PersistError::VersionMismatch {
            found: header.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let snap: Snapshot =
        serde_json::from_str(snapshot_json).map_err(|e| PersistError::CorruptLine {
            seq: 0,
            message: format!("snapshot: {e}"),
        })?;
    let tail = skip_through(tail, snap.as_of_seq);
    let recovered = replay_onto(snap.state, tail);
    match recovered.error {
        None => Ok(recovered.state),
        Some(e) => Err(e),
    }
}

/// Drops leading lines whose seq is at most `seq`.
fn skip_through(log: &str, seq: u64) -> &str {
    #[derive(Deserialize)]
    struct SeqOnly {
        seq: u64,
    }
    let mut rest = log;
    while let Some(i) = rest.find('\n') {
        match serde_json::from_str::<SeqOnly>(&rest[..i]) {
            Ok(s) if s.seq <= seq => rest = &rest[i + 1..],
            _ => break,
        }
    }
    rest
}

pub fn snapshot_path(data_dir: &Path, seq: u64) -> PathBuf {
    data_dir.join(format!("snapshot-{seq}.json"))
}

/// Writes `snapshot-<seq>.json` atomically (temp file then rename).
pub fn write_snapshot(data_dir: &Path, state: &State) -> Result<PathBuf, PersistError> {
    let path = snapshot_path(data_dir, state.last_seq);
    let tmp = path.with_extension("json.tmp");
    let json = serde_json::to_string(&snapshot(state)).expect("snapshot serializes");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(json.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, &path)?;
    Ok(path)
}

fn latest_snapshot(data_dir: &Path) -> Result<Option<PathBuf>, PersistError> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(data_dir)? {
        let path = entry?.path();
        let seq = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("snapshot-"))
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(seq) = seq {
            if best.as_ref().is_none_or(|(s, _)| seq > *s) {
                best = Some((seq, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Opens a data directory: loads the newest snapshot if present, replays
/// the log tail, truncates a torn last line and returns a writer positioned
/// after the last intact event.
pub fn open_data_dir(
    data_dir: &Path,
    iml: &ImlConfig,
    sync_every_append: bool,
) -> Result<(State, EventLog, Option<PersistError>), PersistError> {
    std::fs::create_dir_all(data_dir)?;
    let log_path = data_dir.join(EVENTS_FILE);
    let log = match std::fs::read(&log_path) {
        Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e.into()),
    };
    let state = match latest_snapshot(data_dir)? {
        Some(path) => load(&std::fs::read_to_string(&path)?, "")?,
        None => State::new(iml)?,
    };
    let skipped = log.len() - skip_through(&log, state.last_seq).len();
    let recovered = replay_onto(state, &log[skipped..]);
    let intact = skipped + recovered.valid_bytes;
    if intact < log.len() {
        let f = OpenOptions::new().write(true).open(&log_path)?;
        f.set_len(intact as u64)?;
        f.sync_all()?;
    }
    let writer = EventLog::open_file(log_path, recovered.state.last_seq, sync_every_append)?;
    Ok((recovered.state, writer, recovered.error))
}
