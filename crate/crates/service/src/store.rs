use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use multiwave::engine::{EngineError, SessionState};
use tokio::sync::RwLock;

pub type SessionHandle = Arc<RwLock<SessionState>>;

/// Sessions keyed by id, each persisted as `<dir>/<id>.json`.
///
/// Callers mutate a clone, persist it, and only then swap it in, so a failed
/// write leaves both the file and the in-memory state at the last good wave.
pub struct SessionStore {
    dir: PathBuf,
    sessions: RwLock<HashMap<String, SessionHandle>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl SessionStore {
    /// Open (or create) a store directory and load every session in it.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, EngineError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let mut sessions = HashMap::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if !valid_id(id) {
                continue;
            }
            let state = SessionState::load(&path)?;
            sessions.insert(id.to_string(), Arc::new(RwLock::new(state)));
        }
        Ok(Self {
            dir,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn persist(&self, id: &str, state: &SessionState) -> Result<(), EngineError> {
        state.save(self.path(id))
    }

    /// Persist a new session and register it under a fresh id.
    pub async fn insert(&self, state: SessionState) -> Result<String, EngineError> {
        let mut map = self.sessions.write().await;
        let id = loop {
            let id = uuid::Uuid::new_v4().simple().to_string();
            if !map.contains_key(&id) {
                break id;
            }
        };
        self.persist(&id, &state)?;
        map.insert(id.clone(), Arc::new(RwLock::new(state)));
        Ok(id)
    }

    pub async fn get(&self, id: &str) -> Option<SessionHandle> {
        if !valid_id(id) {
            return None;
        }
        self.sessions.read().await.get(id).cloned()
    }

    pub async fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().await.keys().cloned().collect();
        ids.sort();
        ids
    }
}
