//! Persistent invocation table and transition log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    apply_transition, entry_states, DiscardReason, Invocation, InvocationId, InvocationState, Role,
    TransitionCause, TransitionOutcome,
};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// What happened to one transition request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum LogOutcome {
    Created { state: InvocationState },
    Applied { to: InvocationState },
    Discarded { target: InvocationState, reason: DiscardReason },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LogEntry {
    pub invocation_id: InvocationId,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<InvocationState>,
    #[serde(flatten)]
    pub outcome: LogOutcome,
    pub cause: TransitionCause,
    pub at_ms: u64,
}

/// Append-only, shareable record of every transition request.
#[derive(Debug, Clone, Default)]
pub struct TransitionLog(Arc<Mutex<Vec<LogEntry>>>);

impl TransitionLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, entry: LogEntry) {
        self.0.lock().push(entry);
    }

    pub fn entries(&self) -> Vec<LogEntry> {
        self.0.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.lock().is_empty()
    }

    /// States visited by one record: its entry state followed by every applied target.
    pub fn path(&self, id: InvocationId, role: Role) -> Vec<InvocationState> {
        self.0
            .lock()
            .iter()
            .filter(|e| e.invocation_id == id && e.role == role)
            .filter_map(|e| match e.outcome {
                LogOutcome::Created { state } => Some(state),
                LogOutcome::Applied { to } => Some(to),
                LogOutcome::Discarded { .. } => None,
            })
            .collect()
    }

    pub fn discarded(&self) -> Vec<LogEntry> {
        self.0
            .lock()
            .iter()
            .filter(|e| matches!(e.outcome, LogOutcome::Discarded { .. }))
            .cloned()
            .collect()
    }

    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for entry in self.0.lock().iter() {
            out.push_str(&serde_json::to_string(entry).expect("log entries serialize"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invocation {0} already exists for role {1}")]
    Duplicate(InvocationId, Role),
    #[error("{0} is not an entry state for role {1}")]
    BadEntryState(InvocationState, Role),
    #[error("journal i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

/// Durable backing for the invocation table. Every write carries the
/// complete record; replay keeps the last write per (id, role).
pub trait Journal: Send + Sync {
    fn append(&self, record: &Invocation) -> Result<(), StoreError>;
    fn load(&self) -> Result<Vec<Invocation>, StoreError>;
}

/// JSON-lines journal file.
pub struct FileJournal {
    path: PathBuf,
    file: Mutex<File>,
}

impl FileJournal {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, file: Mutex::new(file) })
    }
}

impl Journal for FileJournal {
    fn append(&self, record: &Invocation) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(record).map_err(|e| StoreError::Corrupt { line: 0, message: e.to_string() })?;
        line.push(b'\n');
        let mut file = self.file.lock();
        file.write_all(&line)?;
        file.flush()?;
        Ok(())
    }

    fn load(&self) -> Result<Vec<Invocation>, StoreError> {
        let reader = BufReader::new(File::open(&self.path)?);
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Invocation>(&line) {
                Ok(record) => records.push(record),
                // a torn final write from a crash is tolerated
                Err(e) if e.is_eof() => break,
                Err(e) => return Err(StoreError::Corrupt { line: n + 1, message: e.to_string() }),
            }
        }
        Ok(records)
    }
}

/// In-memory journal that survives "restarts" of the runtimes built on it.
#[derive(Debug, Clone, Default)]
pub struct MemoryJournal(Arc<Mutex<Vec<Invocation>>>);

impl Journal for MemoryJournal {
    fn append(&self, record: &Invocation) -> Result<(), StoreError> {
        self.0.lock().push(record.clone());
        Ok(())
    }

    fn load(&self) -> Result<Vec<Invocation>, StoreError> {
        Ok(self.0.lock().clone())
    }
}

/// The invocation table of one connector, keyed by (id, role).
///
/// All state changes are serialized by one lock, which makes transitions
/// linearizable per invocation.
pub struct InvocationStore {
    records: Mutex<BTreeMap<(InvocationId, Role), Invocation>>,
    journal: Option<Arc<dyn Journal>>,
    clock: Arc<dyn Clock>,
    log: TransitionLog,
}

impl InvocationStore {
    pub fn in_memory(clock: Arc<dyn Clock>, log: TransitionLog) -> Self {
        Self { records: Mutex::new(BTreeMap::new()), journal: None, clock, log }
    }

    /// Opens a store over `journal`, restoring whatever it holds.
    pub fn open(journal: Arc<dyn Journal>, clock: Arc<dyn Clock>, log: TransitionLog) -> Result<Self, StoreError> {
        let mut records = BTreeMap::new();
        for record in journal.load()? {
            records.insert((record.id, record.role), record);
        }
        Ok(Self { records: Mutex::new(records), journal: Some(journal), clock, log })
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn log(&self) -> &TransitionLog {
        &self.log
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn persist(&self, record: &Invocation) {
        if let Some(journal) = &self.journal {
            if let Err(e) = journal.append(record) {
                tracing::error!(invocation = %record.id, error = %e, "failed to persist invocation");
            }
        }
    }

    /// Inserts a fresh record in one of the role's entry states.
    pub fn create(&self, record: Invocation, cause: TransitionCause) -> Result<(), StoreError> {
        if !entry_states(record.role).contains(&record.state) {
            return Err(StoreError::BadEntryState(record.state, record.role));
        }
        let mut records = self.records.lock();
        let key = (record.id, record.role);
        if records.contains_key(&key) {
            return Err(StoreError::Duplicate(record.id, record.role));
        }
        self.persist(&record);
        self.log.push(LogEntry {
            invocation_id: record.id,
            role: record.role,
            from: None,
            outcome: LogOutcome::Created { state: record.state },
            cause,
            at_ms: record.created_at,
        });
        records.insert(key, record);
        Ok(())
    }

    /// Requests `target` for the record. `update` runs on the new record
    /// only when the transition is applied. Returns `None` for unknown records.
    pub fn transition_with(
        &self,
        id: InvocationId,
        role: Role,
        target: InvocationState,
        cause: TransitionCause,
        update: impl FnOnce(&mut Invocation),
    ) -> Option<TransitionOutcome> {
        let mut records = self.records.lock();
        let current = records.get_mut(&(id, role))?;
        let now = self.clock.now_ms();
        let outcome = apply_transition(current, target, cause, now);
        match &outcome {
            TransitionOutcome::Applied(next) => {
                let mut next = next.clone();
                update(&mut next);
                self.persist(&next);
                self.log.push(LogEntry {
                    invocation_id: id,
                    role,
                    from: Some(current.state),
                    outcome: LogOutcome::Applied { to: target },
                    cause,
                    at_ms: next.updated_at,
                });
                *current = next.clone();
                Some(TransitionOutcome::Applied(next))
            }
            TransitionOutcome::Discarded(reason) => {
                tracing::debug!(invocation = %id, %role, from = %current.state, %target, %reason, "transition discarded");
                self.log.push(LogEntry {
                    invocation_id: id,
                    role,
                    from: Some(current.state),
                    outcome: LogOutcome::Discarded { target, reason: *reason },
                    cause,
                    at_ms: now,
                });
                Some(outcome)
            }
        }
    }

    pub fn transition(
        &self,
        id: InvocationId,
        role: Role,
        target: InvocationState,
        cause: TransitionCause,
    ) -> Option<TransitionOutcome> {
        self.transition_with(id, role, target, cause, |_| {})
    }

    /// Logs a request rejected before it reached the state machine, e.g. a
    /// replayed signal whose side effects already happened.
    pub fn record_discard(
        &self,
        id: InvocationId,
        role: Role,
        target: InvocationState,
        reason: DiscardReason,
        cause: TransitionCause,
    ) {
        let from = self.records.lock().get(&(id, role)).map(|r| r.state);
        self.log.push(LogEntry {
            invocation_id: id,
            role,
            from,
            outcome: LogOutcome::Discarded { target, reason },
            cause,
            at_ms: self.clock.now_ms(),
        });
    }

    pub fn get(&self, id: InvocationId, role: Role) -> Option<Invocation> {
        self.records.lock().get(&(id, role)).cloned()
    }

    pub fn list(&self, role: Role) -> Vec<Invocation> {
        self.records.lock().values().filter(|r| r.role == role).cloned().collect()
    }
}
