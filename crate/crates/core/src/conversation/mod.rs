//! Sessions and their durable dialogue history.
//!
//! Each session is one append-only JSON Lines file, `sessions/<id>.jsonl`.
//! The first line is a header, every later line one turn. Every line carries
//! a schema version `v`. A trailing line without its newline is a torn write
//! and is cut off when the log is opened.

pub mod media;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{Mutex, OwnedMutexGuard};

use crate::backends::{AudioArtifact, VideoArtifact};
use crate::meta_response::{Exchange, MetaResponse};
use crate::pipeline::TurnTrace;

pub use media::{MediaFormat, MediaStore, StoredMedia};

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaRef {
    pub hash: String,
    pub format: MediaFormat,
}

/// What the user sent, with media referenced by content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDescriptor {
    pub text: Option<String>,
    pub audio: Option<MediaRef>,
    pub video: Option<MediaRef>,
    /// Text the prompt saw for this input: typed text plus transcript lines.
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseDescriptor {
    pub response_text: String,
    pub audio: Option<AudioArtifact>,
    pub video: Option<VideoArtifact>,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub index: usize,
    pub input: InputDescriptor,
    pub response: ResponseDescriptor,
    pub meta: MetaResponse,
    pub trace: TurnTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub created_at: DateTime<Utc>,
    pub turns: Vec<TurnRecord>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

/// The last `min(window, len)` exchanges, oldest first.
pub fn history_window(session: &Session, window: usize) -> Vec<Exchange> {
    let skip = session.turns.len().saturating_sub(window);
    session.turns[skip..]
        .iter()
        .map(|t| Exchange::new(t.input.surface.clone(), t.response.response_text.clone()))
        .collect()
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("turn index {got} does not follow session length {expected}")]
    IndexConflict { expected: usize, got: usize },
    #[error("storage full: {0}")]
    StorageFull(io::Error),
    #[error("session log {path} is corrupt at line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("session storage: {0}")]
    Io(io::Error),
}

impl From<io::Error> for SessionError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            SessionError::StorageFull(e)
        } else {
            SessionError::Io(e)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Session {
        v: u32,
        id: String,
        created_at: DateTime<Utc>,
    },
    Turn {
        v: u32,
        record: Box<TurnRecord>,
    },
}

/// Result of reading one log file.
#[derive(Debug)]
pub struct Recovered {
    pub session: Session,
    /// Bytes cut from the end of the file.
    pub dropped_bytes: u64,
}

fn corrupt(path: &Path, line: usize, reason: impl Into<String>) -> SessionError {
    SessionError::Corrupt {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Reads a session log, truncating a torn trailing record in place.
pub fn recover_log(path: &Path) -> Result<Recovered, SessionError> {
    let bytes = fs::read(path)?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    let dropped_bytes = (bytes.len() - complete) as u64;
    if dropped_bytes > 0 {
        let file = OpenOptions::new().write(true).open(path)?;
        file.set_len(complete as u64)?;
        file.sync_all()?;
        tracing::warn!(path = %path.display(), dropped_bytes, "dropped torn trailing record");
    }
    let text = std::str::from_utf8(&bytes[..complete]).map_err(|e| corrupt(path, 0, format!("not UTF-8: {e}")))?;
    let mut lines = text.lines().enumerate();
    let (id, created_at) = match lines.next() {
        Some((_, line)) => match serde_json::from_str::<LogLine>(line) {
            Ok(LogLine::Session { v, id, created_at }) => {
                if v != LOG_VERSION {
                    return Err(corrupt(path, 1, format!("unsupported version {v}")));
                }
                (id, created_at)
            }
            Ok(LogLine::Turn { .. }) => return Err(corrupt(path, 1, "missing session header")),
            Err(e) => return Err(corrupt(path, 1, e.to_string())),
        },
        None => return Err(corrupt(path, 0, "empty log")),
    };
    let mut turns = Vec::new();
    for (i, line) in lines {
        match serde_json::from_str::<LogLine>(line) {
            Ok(LogLine::Turn { v, record }) => {
                if v != LOG_VERSION {
                    return Err(corrupt(path, i + 1, format!("unsupported version {v}")));
                }
                if record.index != turns.len() {
                    return Err(corrupt(
                        path,
                        i + 1,
                        format!("turn index {} where {} expected", record.index, turns.len()),
                    ));
                }
                turns.push(*record);
            }
            Ok(LogLine::Session { .. }) => return Err(corrupt(path, i + 1, "duplicate session header")),
            Err(e) => return Err(corrupt(path, i + 1, e.to_string())),
        }
    }
    Ok(Recovered {
        session: Session { id, created_at, turns },
        dropped_bytes,
    })
}

fn is_valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

fn append_line(path: &Path, line: &LogLine, create: bool) -> Result<(), SessionError> {
    let mut buf = serde_json::to_vec(line).map_err(|e| SessionError::Io(io::Error::other(e)))?;
    buf.push(b'\n');
    let mut file = if create {
        OpenOptions::new().append(true).create_new(true).open(path)?
    } else {
        OpenOptions::new().append(true).open(path)?
    };
    file.write_all(&buf)?;
    file.sync_data()?;
    Ok(())
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

struct Entry {
    path: PathBuf,
    /// Held for the whole of a turn; tokio's mutex hands out the lock FIFO.
    turn_lock: Arc<Mutex<()>>,
    snapshot: RwLock<Session>,
}

/// Durable session logs under `<root>/sessions`.
#[derive(Clone)]
pub struct SessionStore {
    dir: PathBuf,
    entries: Arc<RwLock<HashMap<String, Arc<Entry>>>>,
}

impl std::fmt::Debug for SessionStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionStore").field("dir", &self.dir).finish()
    }
}

impl SessionStore {
    /// Opens the store, recovering every existing log.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, SessionError> {
        let dir = root.as_ref().join("sessions");
        fs::create_dir_all(&dir)?;
        let mut map = HashMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let recovered = recover_log(&path)?;
            map.insert(
                recovered.session.id.clone(),
                Arc::new(Entry {
                    path,
                    turn_lock: Arc::new(Mutex::new(())),
                    snapshot: RwLock::new(recovered.session),
                }),
            );
        }
        Ok(Self {
            dir,
            entries: Arc::new(RwLock::new(map)),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    pub fn create_session(&self) -> Result<Session, SessionError> {
        let session = Session {
            id: uuid::Uuid::new_v4().simple().to_string(),
            created_at: Utc::now(),
            turns: Vec::new(),
        };
        let path = self.log_path(&session.id);
        append_line(
            &path,
            &LogLine::Session {
                v: LOG_VERSION,
                id: session.id.clone(),
                created_at: session.created_at,
            },
            true,
        )?;
        sync_dir(&self.dir)?;
        self.entries.write().expect("session map poisoned").insert(
            session.id.clone(),
            Arc::new(Entry {
                path,
                turn_lock: Arc::new(Mutex::new(())),
                snapshot: RwLock::new(session.clone()),
            }),
        );
        Ok(session)
    }

    fn entry(&self, id: &str) -> Result<Arc<Entry>, SessionError> {
        if !is_valid_session_id(id) {
            return Err(SessionError::SessionNotFound(id.to_string()));
        }
        self.entries
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::SessionNotFound(id.to_string()))
    }

    pub fn exists(&self, id: &str) -> bool {
        self.entry(id).is_ok()
    }

    /// Current snapshot; never waits for a running turn.
    pub fn get(&self, id: &str) -> Result<Session, SessionError> {
        Ok(self.entry(id)?.snapshot.read().expect("snapshot poisoned").clone())
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self
            .entries
            .read()
            .expect("session map poisoned")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }

    /// Waits for exclusive turn access to a session. Waiters are served in
    /// arrival order.
    pub async fn begin_turn(&self, id: &str) -> Result<TurnGuard, SessionError> {
        let entry = self.entry(id)?;
        let guard = entry.turn_lock.clone().lock_owned().await;
        Ok(TurnGuard { entry, _guard: guard })
    }

    /// Appends one turn; durable before returning.
    pub async fn append_turn(&self, id: &str, record: TurnRecord) -> Result<Session, SessionError> {
        self.begin_turn(id).await?.append(record)
    }
}

/// Exclusive right to append to one session.
pub struct TurnGuard {
    entry: Arc<Entry>,
    _guard: OwnedMutexGuard<()>,
}

impl TurnGuard {
    pub fn session(&self) -> Session {
        self.entry.snapshot.read().expect("snapshot poisoned").clone()
    }

    pub fn next_index(&self) -> usize {
        self.entry.snapshot.read().expect("snapshot poisoned").turns.len()
    }

    pub fn append(&self, record: TurnRecord) -> Result<Session, SessionError> {
        let expected = self.next_index();
        if record.index != expected {
            return Err(SessionError::IndexConflict {
                expected,
                got: record.index,
            });
        }
        append_line(
            &self.entry.path,
            &LogLine::Turn {
                v: LOG_VERSION,
                record: Box::new(record.clone()),
            },
            false,
        )?;
        let mut snapshot = self.entry.snapshot.write().expect("snapshot poisoned");
        snapshot.turns.push(record);
        Ok(snapshot.clone())
    }
}
