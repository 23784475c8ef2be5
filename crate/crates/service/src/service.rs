use std::path::Path;
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::Result;
use crate::log::{replay, AppendLog};
use crate::state::{LogRecord, ServiceState};
use crate::types::*;

/// Shared service handle. Writers are serialized through the log lock and
/// every change is persisted before it becomes visible.
pub struct Service {
    state: RwLock<ServiceState>,
    log: Mutex<AppendLog>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Service {
    /// Open (or create) the log at `path` and rebuild state from it.
    pub fn open(path: &Path) -> Result<Self> {
        let state = replay(path)?;
        Ok(Self {
            state: RwLock::new(state),
            log: Mutex::new(AppendLog::open(path)?),
        })
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, ServiceState> {
        self.state.read().expect("state lock poisoned")
    }

    fn commit(&self, log: &mut AppendLog, rec: LogRecord) -> Result<()> {
        log.append(&rec)?;
        self.state.write().expect("state lock poisoned").apply(&rec)
    }

    pub fn create_session(&self, req: &CreateSession) -> Result<SessionCreated> {
        let mut log = self.log.lock().expect("log lock poisoned");
        let manifest = self.read().plan_session(req)?;
        let id = manifest.session_id.clone();
        self.commit(&mut log, LogRecord::SessionCreated { manifest })?;
        log::info!("session {id} created");
        self.read().created(&id)
    }

    pub fn submit(&self, req: &AnnotationRequest) -> Result<AnnotationAck> {
        let mut log = self.log.lock().expect("log lock poisoned");
        let (record, duplicate) = self.read().plan_annotation(req, now_ms())?;
        self.commit(&mut log, LogRecord::Annotation { record })?;
        self.read().ack(&req.session_id, duplicate)
    }

    pub fn card_list(&self, session: &str) -> Result<CardList> {
        self.read().card_list(session)
    }

    pub fn card(&self, opaque: &str) -> Result<FeatureCard> {
        self.read().card(opaque)
    }

    pub fn stats(&self, session: &str, partial: bool) -> Result<SessionStats> {
        self.read().stats(session, partial)
    }

    /// Reveal provenance and close the session to further edits.
    pub fn reveal(&self, session: &str) -> Result<Reveal> {
        let mut log = self.log.lock().expect("log lock poisoned");
        let reveal = self.read().reveal(session)?;
        if !self.read().is_closed(session)? {
            self.commit(
                &mut log,
                LogRecord::Revealed {
                    session_id: session.to_string(),
                },
            )?;
        }
        Ok(reveal)
    }
}
