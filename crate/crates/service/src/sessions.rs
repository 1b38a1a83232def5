//! Durable annotation sessions. Every mutation appends its events to the
//! session journal (fsynced) before the caller acknowledges it; on startup
//! sessions are rebuilt by replaying their journals.

use std::collections::HashMap;
use std::path::PathBuf;

use axum::http::StatusCode;
use serde::{Deserialize, Serialize};

use histoloop_core::cluster::{AnnotationSession, SessionConfig, SessionEvent};
use histoloop_core::embedder::{read_embeddings, Embedding};
use histoloop_core::journal;
use histoloop_core::labels::upsert_slide;
use histoloop_core::{EventMeta, Timestamp};

use crate::error::ApiError;
use crate::layout::{DataRoot, SESSION_FILE, SESSION_JOURNAL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub slide_id: String,
    pub token: String,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<String>,
    pub event: SessionEvent,
}

pub fn session_id_for(slide_id: &str) -> String {
    format!("sess-{slide_id}")
}

pub struct SessionSlot {
    pub meta: SessionMeta,
    pub session: AnnotationSession,
    pub embeddings: Vec<Embedding>,
    /// idempotency key -> request fingerprint
    keys: HashMap<String, String>,
    journal_path: PathBuf,
    dataset_dir: PathBuf,
}

pub enum KeyCheck {
    Fresh,
    Replayed,
}

fn load_embeddings(root: &DataRoot, slide_id: &str) -> Result<Vec<Embedding>, ApiError> {
    let dir = root.slide_dir(slide_id);
    let missing = |detail: String| {
        ApiError::new(StatusCode::CONFLICT, "missing_embeddings", format!("slide `{slide_id}` has no usable embeddings: {detail}"))
            .with_hint(format!("run `histoloop tile` and `histoloop embed` for `{slide_id}` under {}", root.path().display()))
    };
    let (index, embeddings) = read_embeddings(&dir).map_err(|e| missing(e.to_string()))?;
    if index.slide_id != slide_id {
        return Err(missing(format!("the store belongs to `{}`", index.slide_id)));
    }
    if embeddings.is_empty() {
        return Err(missing("no foreground tiles".into()));
    }
    Ok(embeddings)
}

impl SessionSlot {
    /// Clusters the slide and journals the creation event.
    pub fn create(root: &DataRoot, slide_id: &str, config: SessionConfig, actor: &str) -> Result<Self, ApiError> {
        let embeddings = load_embeddings(root, slide_id)?;
        let session_id = session_id_for(slide_id);
        let meta = SessionMeta {
            session_id: session_id.clone(),
            slide_id: slide_id.to_string(),
            token: uuid::Uuid::new_v4().to_string(),
            created_at: Timestamp::now(),
        };
        let session = AnnotationSession::start(&session_id, &embeddings, config, EventMeta::new(actor, meta.created_at))?;
        let dir = root.session_dir(&session_id);
        std::fs::create_dir_all(&dir).map_err(ApiError::internal)?;
        let journal_path = dir.join(SESSION_JOURNAL);
        // A journal without a committed creation event is left over from a
        // crash during create and is discarded.
        if journal_path.exists() {
            std::fs::remove_file(&journal_path).map_err(ApiError::internal)?;
        }
        let tmp = dir.join(".session.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&meta).map_err(ApiError::internal)?).map_err(ApiError::internal)?;
        std::fs::rename(&tmp, dir.join(SESSION_FILE)).map_err(ApiError::internal)?;
        let mut slot = Self {
            meta,
            session,
            embeddings,
            keys: HashMap::new(),
            journal_path,
            dataset_dir: root.dataset_dir(),
        };
        slot.commit(0, None, None)?;
        Ok(slot)
    }

    /// Rebuilds a session from disk. `Ok(None)` when the directory holds
    /// no committed session.
    pub fn load(root: &DataRoot, session_id: &str) -> Result<Option<Self>, ApiError> {
        let dir = root.session_dir(session_id);
        let meta_path = dir.join(SESSION_FILE);
        if !meta_path.is_file() {
            return Ok(None);
        }
        let meta: SessionMeta =
            serde_json::from_slice(&std::fs::read(&meta_path).map_err(ApiError::internal)?).map_err(ApiError::internal)?;
        let journal_path = dir.join(SESSION_JOURNAL);
        let entries: Vec<JournalEntry> = journal::read(&journal_path).map_err(ApiError::internal)?;
        if entries.is_empty() {
            return Ok(None);
        }
        let embeddings = load_embeddings(root, &meta.slide_id)?;
        let events: Vec<SessionEvent> = entries.iter().map(|e| e.event.clone()).collect();
        let session = AnnotationSession::replay(&meta.session_id, &embeddings, &events)?;
        let keys = entries
            .into_iter()
            .filter_map(|e| Some((e.idempotency_key?, e.request.unwrap_or_default())))
            .collect();
        let slot = Self { meta, session, embeddings, keys, journal_path, dataset_dir: root.dataset_dir() };
        slot.sync_dataset()?;
        Ok(Some(slot))
    }

    /// Checks an idempotency key against earlier requests.
    pub fn check_key(&self, key: Option<&str>, request: &str) -> Result<KeyCheck, ApiError> {
        match key.and_then(|k| self.keys.get(k)) {
            None => Ok(KeyCheck::Fresh),
            Some(seen) if seen == request => Ok(KeyCheck::Replayed),
            Some(_) => Err(ApiError::invalid("idempotency key was already used for a different request")),
        }
    }

    /// Journals events from index `from` on. The key is stored with the last one.
    pub fn commit(&mut self, from: usize, key: Option<&str>, request: Option<&str>) -> Result<(), ApiError> {
        let events = self.session.events();
        let last = events.len().saturating_sub(1);
        for (i, event) in events.iter().enumerate().skip(from) {
            let tagged = i == last;
            let entry = JournalEntry {
                idempotency_key: key.filter(|_| tagged).map(str::to_string),
                request: request.filter(|_| tagged && key.is_some()).map(str::to_string),
                event: event.clone(),
            };
            journal::append(&self.journal_path, &entry).map_err(ApiError::internal)?;
        }
        if let (Some(k), Some(r)) = (key, request) {
            self.keys.insert(k.to_string(), r.to_string());
        }
        self.sync_dataset()
    }

    /// Makes sure a finalized result is in the label store.
    fn sync_dataset(&self) -> Result<(), ApiError> {
        if let Some(result) = self.session.result() {
            upsert_slide(&self.dataset_dir, result.clone()).map_err(ApiError::internal)?;
        }
        Ok(())
    }
}
