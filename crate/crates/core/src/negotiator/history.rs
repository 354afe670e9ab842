//! Job history: one JSON line per record update, appended to a file on the
//! shared filesystem. The newest line for an application wins, so the file
//! stays readable by a fresh process after the cluster is gone.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::protocol::{AppId, ApplicationRecord};

#[derive(Debug, Clone)]
pub struct HistoryStore {
    path: PathBuf,
}

impl HistoryStore {
    pub fn new(path: impl Into<PathBuf>) -> HistoryStore {
        HistoryStore { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends `record`; only terminal records are accepted.
    pub fn record_history(&self, record: &ApplicationRecord) -> Result<()> {
        if !record.state.is_terminal() {
            return Err(Error::Protocol(format!("{} is not terminal", record.app_id)));
        }
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir).map_err(Error::path_io(dir))?;
        }
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(Error::path_io(&self.path))?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        Ok(())
    }

    pub fn query_history(&self, app_id: &AppId) -> Result<ApplicationRecord> {
        query_history(&self.path, app_id)
    }

    /// Latest record of every application, in first-seen order.
    pub fn all(&self) -> Result<Vec<ApplicationRecord>> {
        let mut out: Vec<ApplicationRecord> = Vec::new();
        for rec in read_records(&self.path)? {
            match out.iter_mut().find(|r| r.app_id == rec.app_id) {
                Some(slot) => *slot = rec,
                None => out.push(rec),
            }
        }
        Ok(out)
    }
}

fn read_records(path: &Path) -> Result<Vec<ApplicationRecord>> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::PathIo { path: path.into(), source: e }),
    };
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn last line (writer killed mid-append) is skipped.
        if let Ok(rec) = serde_json::from_str::<ApplicationRecord>(&line) {
            out.push(rec);
        }
    }
    Ok(out)
}

/// Reads the newest record for `app_id` straight from a history file.
pub fn query_history(path: &Path, app_id: &AppId) -> Result<ApplicationRecord> {
    read_records(path)?
        .into_iter()
        .rev()
        .find(|r| &r.app_id == app_id)
        .ok_or_else(|| Error::NotFound(app_id.to_string()))
}
