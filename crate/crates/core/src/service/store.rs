//! Durable session storage: one directory per session holding an append-only
//! `log.jsonl` and an occasional `snapshot.json`. An answer is written and
//! synced to the log before it is applied or acknowledged; on open every
//! session is rebuilt from its snapshot plus the log records after it.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::session::{
    validate_session_id, Ack, Answer, LabelExport, NextQuestion, SessionProgress, SessionSpec, SessionState,
};
use crate::engine::checkpoint::RunCheckpoint;
use crate::error::{Error, Result};

pub const LOG_VERSION: u32 = 1;
const LOG_FILE: &str = "log.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Created { version: u32, spec: SessionSpec, checkpoint: RunCheckpoint },
    Answer(Answer),
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    /// Log records already reflected in `state`.
    records: u64,
    state: SessionState,
}

/// Places where a simulated crash can stop a submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    BeforeAppend,
    /// Half the record reaches the log.
    TornAppend,
    AfterAppend,
    BeforeAck,
}

impl CrashPoint {
    fn name(self) -> &'static str {
        match self {
            CrashPoint::BeforeAppend => "before-append",
            CrashPoint::TornAppend => "torn-append",
            CrashPoint::AfterAppend => "after-append",
            CrashPoint::BeforeAck => "before-ack",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    /// Answers between snapshots; 0 disables snapshots.
    pub snapshot_every: u64,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self { snapshot_every: 50 }
    }
}

struct Live {
    state: SessionState,
    log: File,
    records: u64,
    since_snapshot: u64,
}

struct Handle {
    dir: PathBuf,
    live: RwLock<Live>,
}

pub struct SessionStore {
    root: PathBuf,
    options: StoreOptions,
    sessions: RwLock<HashMap<String, Arc<Handle>>>,
    crash: Mutex<Option<CrashPoint>>,
}

fn append(log: &mut File, record: &LogRecord) -> Result<()> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    log.write_all(&line)?;
    log.sync_data()?;
    Ok(())
}

/// Complete records of a log. A final line without its newline is a write
/// that never finished; it is dropped and cut from the file.
fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let bytes = fs::read(path)?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete < bytes.len() {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(complete as u64)?;
        f.sync_data()?;
    }
    bytes[..complete]
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_slice(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn replay(dir: &Path) -> Result<(SessionState, u64)> {
    let log_path = dir.join(LOG_FILE);
    let records = read_log(&log_path)?;
    let mut iter = records.into_iter();
    let (spec, checkpoint) = match iter.next() {
        Some(LogRecord::Created { version, spec, checkpoint }) => {
            if version != LOG_VERSION {
                return Err(Error::Version { found: version, expected: LOG_VERSION });
            }
            (spec, checkpoint)
        }
        _ => return Err(Error::Input(format!("{}: log does not start with a creation record", log_path.display()))),
    };
    let rest: Vec<LogRecord> = iter.collect();
    let total = rest.len() as u64 + 1;

    let snapshot = fs::read(dir.join(SNAPSHOT_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice::<Snapshot>(&b).ok())
        .filter(|s| s.version == LOG_VERSION && s.records >= 1 && s.records <= total);
    let (mut state, skip) = match snapshot {
        Some(s) => {
            let mut state = s.state;
            state.rebuild_index();
            (state, s.records - 1)
        }
        None => (SessionState::create(spec, checkpoint)?, 0),
    };
    for record in rest.into_iter().skip(skip as usize) {
        match record {
            LogRecord::Answer(a) => {
                state.apply_answer(a)?;
            }
            LogRecord::Created { .. } => {
                return Err(Error::Input(format!("{}: second creation record", log_path.display())));
            }
        }
    }
    Ok((state, total))
}

impl SessionStore {
    /// Opens `root`, creating it if needed, and rebuilds every session in it.
    pub fn open(root: impl Into<PathBuf>, options: StoreOptions) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut sessions = HashMap::new();
        for entry in fs::read_dir(&root)? {
            let dir = entry?.path();
            if !dir.join(LOG_FILE).is_file() {
                continue;
            }
            let (state, records) = replay(&dir)?;
            let log = OpenOptions::new().append(true).open(dir.join(LOG_FILE))?;
            let id = state.session_id().to_string();
            let live = Live { state, log, records, since_snapshot: 0 };
            sessions.insert(id, Arc::new(Handle { dir, live: RwLock::new(live) }));
        }
        Ok(Self { root, options, sessions: RwLock::new(sessions), crash: Mutex::new(None) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Arms a one-shot crash for the next submission. After it fires the
    /// session is dropped from memory, as a dead process would lose it.
    pub fn inject_crash(&self, point: CrashPoint) {
        *self.crash.lock().unwrap() = Some(point);
    }

    fn crash_at(&self, point: CrashPoint) -> bool {
        let mut armed = self.crash.lock().unwrap();
        if *armed == Some(point) {
            *armed = None;
            true
        } else {
            false
        }
    }

    fn handle(&self, id: &str) -> Result<Arc<Handle>> {
        self.sessions.read().unwrap().get(id).cloned().ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn create_session(&self, spec: SessionSpec, checkpoint: RunCheckpoint) -> Result<String> {
        validate_session_id(&spec.session_id)?;
        let id = spec.session_id.clone();
        let mut sessions = self.sessions.write().unwrap();
        let dir = self.root.join(&id);
        if sessions.contains_key(&id) || dir.exists() {
            return Err(Error::SessionExists(id));
        }
        let record = LogRecord::Created { version: LOG_VERSION, spec: spec.clone(), checkpoint: checkpoint.clone() };
        let state = SessionState::create(spec, checkpoint)?;
        fs::create_dir_all(&dir)?;
        let mut log = OpenOptions::new().create_new(true).append(true).open(dir.join(LOG_FILE))?;
        append(&mut log, &record)?;
        let live = Live { state, log, records: 1, since_snapshot: 0 };
        sessions.insert(id.clone(), Arc::new(Handle { dir, live: RwLock::new(live) }));
        Ok(id)
    }

    pub fn next_question(&self, id: &str) -> Result<NextQuestion> {
        Ok(self.handle(id)?.live.read().unwrap().state.next_question())
    }

    pub fn progress(&self, id: &str) -> Result<SessionProgress> {
        Ok(self.handle(id)?.live.read().unwrap().state.progress())
    }

    pub fn export_labels(&self, id: &str) -> Result<LabelExport> {
        Ok(self.handle(id)?.live.read().unwrap().state.export_labels())
    }

    /// Copy of the full session state.
    pub fn state(&self, id: &str) -> Result<SessionState> {
        Ok(self.handle(id)?.live.read().unwrap().state.clone())
    }

    fn crashed(&self, id: &str, point: CrashPoint) -> Error {
        self.sessions.write().unwrap().remove(id);
        Error::InjectedCrash(point.name())
    }

    pub fn submit_answer(&self, id: &str, answer: Answer) -> Result<Ack> {
        let handle = self.handle(id)?;
        let mut live = handle.live.write().unwrap();
        live.state.check_answer(&answer)?;
        if self.crash_at(CrashPoint::BeforeAppend) {
            return Err(self.crashed(id, CrashPoint::BeforeAppend));
        }
        let record = LogRecord::Answer(answer.clone());
        if self.crash_at(CrashPoint::TornAppend) {
            let line = serde_json::to_vec(&record)?;
            live.log.write_all(&line[..line.len() / 2])?;
            live.log.sync_data()?;
            return Err(self.crashed(id, CrashPoint::TornAppend));
        }
        append(&mut live.log, &record)?;
        live.records += 1;
        if self.crash_at(CrashPoint::AfterAppend) {
            return Err(self.crashed(id, CrashPoint::AfterAppend));
        }
        let ack = live.state.apply_answer(answer)?;
        live.since_snapshot += 1;
        if self.options.snapshot_every > 0 && live.since_snapshot >= self.options.snapshot_every {
            let snap = Snapshot { version: LOG_VERSION, records: live.records, state: live.state.clone() };
            write_atomic(&handle.dir.join(SNAPSHOT_FILE), &serde_json::to_vec(&snap)?)?;
            live.since_snapshot = 0;
        }
        if self.crash_at(CrashPoint::BeforeAck) {
            return Err(self.crashed(id, CrashPoint::BeforeAck));
        }
        Ok(ack)
    }
}
