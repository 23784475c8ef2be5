//! Append-only JSONL persistence. Every record is flushed and synced before
//! the request that produced it is acknowledged.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Result, ServiceError};
use crate::state::{LogRecord, ServiceState};

pub struct AppendLog {
    path: PathBuf,
    file: File,
}

/// Parse every record of a log file. A missing file is an empty log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ServiceError::Log {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Rebuild the in-memory state from a log file.
pub fn replay(path: &Path) -> Result<ServiceState> {
    let mut st = ServiceState::default();
    for (i, rec) in read_log(path)?.iter().enumerate() {
        st.apply(rec).map_err(|e| ServiceError::Log {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
    }
    Ok(st)
}

impl AppendLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, rec: &LogRecord) -> Result<()> {
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}
