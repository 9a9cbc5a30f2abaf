//! Append-only JSON-lines event log, one file per session.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::session::{ResponseInput, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    /// The freshly scheduled session, before any response.
    Created { session: Session },
    Response {
        trial: usize,
        input: ResponseInput,
        received_at_ms: u64,
    },
}

#[derive(Debug)]
pub struct SessionLog {
    path: PathBuf,
    file: File,
}

pub fn log_path(dir: &Path, session_id: &str) -> PathBuf {
    dir.join(format!("{session_id}.jsonl"))
}

impl SessionLog {
    pub fn create(dir: &Path, session: &Session) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| ServiceError::io(dir, e))?;
        let path = log_path(dir, &session.id);
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(|e| ServiceError::io(&path, e))?;
        let mut log = SessionLog { path, file };
        log.append(&Event::Created {
            session: session.clone(),
        })?;
        Ok(log)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &Event) -> Result<()> {
        let mut line = serde_json::to_vec(event).map_err(|e| ServiceError::Corrupt {
            path: self.path.clone(),
            reason: e.to_string(),
        })?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|()| self.file.sync_data())
            .map_err(|e| ServiceError::io(&self.path, e))
    }

    /// Rebuilds a session by replaying its log. A torn final line (crash
    /// mid-write) is dropped and truncated away; damage anywhere else is an
    /// error.
    pub fn resume(path: &Path) -> Result<(Session, SessionLog)> {
        let corrupt = |reason: String| ServiceError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let reader = BufReader::new(File::open(path).map_err(|e| ServiceError::io(path, e))?);
        let mut lines: Vec<String> = Vec::new();
        for line in reader.lines() {
            lines.push(line.map_err(|e| ServiceError::io(path, e))?);
        }
        let mut events = Vec::with_capacity(lines.len());
        let mut good_bytes = 0u64;
        for (i, line) in lines.iter().enumerate() {
            match serde_json::from_str::<Event>(line) {
                Ok(ev) => {
                    events.push(ev);
                    good_bytes += line.len() as u64 + 1;
                }
                Err(_) if i + 1 == lines.len() => break,
                Err(e) => return Err(corrupt(format!("line {}: {e}", i + 1))),
            }
        }
        let mut it = events.into_iter();
        let mut session = match it.next() {
            Some(Event::Created { session }) => session,
            _ => return Err(corrupt("log does not start with a created event".into())),
        };
        for ev in it {
            match ev {
                Event::Response {
                    trial,
                    input,
                    received_at_ms,
                } => {
                    session
                        .record_response(trial, &input, received_at_ms)
                        .map_err(|e| corrupt(format!("replaying trial {trial}: {e}")))?;
                }
                Event::Created { .. } => return Err(corrupt("second created event".into())),
            }
        }
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| ServiceError::io(path, e))?;
        if file.metadata().map_err(|e| ServiceError::io(path, e))?.len() != good_bytes {
            file.set_len(good_bytes).map_err(|e| ServiceError::io(path, e))?;
        }
        Ok((
            session,
            SessionLog {
                path: path.to_path_buf(),
                file,
            },
        ))
    }
}

/// Every `*.jsonl` session log in `dir` (none if the directory is absent).
pub fn resume_all(dir: &Path) -> Result<Vec<(Session, SessionLog)>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ServiceError::io(dir, e)),
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().map(|p| SessionLog::resume(p)).collect()
}
