use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use gridwall_core::arena::{ArenaState, EloTable, MatchResult};
use gridwall_core::checkpoint::{decode, list_checkpoints};
use gridwall_core::env::EnvConfig;
use gridwall_core::policy::Policy;
use gridwall_core::track::TrackConfig;
use serde::Serialize;
use tokio::sync::{broadcast, Mutex};

use crate::duel::{DuelSession, LapResult};
use crate::error::ApiError;
use crate::ConsoleError;

/// Leaderboard file name inside the agents directory.
pub const ARENA_FILE: &str = "arena.json";

#[derive(Debug, Clone)]
pub struct AgentInfo {
    pub id: String,
    pub path: PathBuf,
    pub policy: Arc<Policy>,
    pub track_hash: String,
    /// Built for the track the server runs.
    pub compatible: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AgentView {
    pub id: String,
    pub name: String,
    pub provenance: String,
    pub elo: Option<f64>,
    pub track_hash: String,
    pub compatible: bool,
    pub backbone_frozen: bool,
    pub backbone_hash: String,
    pub file: String,
}

impl AgentInfo {
    pub fn view(&self) -> AgentView {
        let p = &self.policy;
        AgentView {
            id: self.id.clone(),
            name: p.meta.name.clone(),
            provenance: p.meta.provenance.clone(),
            elo: p.meta.elo,
            track_hash: self.track_hash.clone(),
            compatible: self.compatible,
            backbone_frozen: p.backbone_frozen,
            backbone_hash: p.backbone_hash(),
            file: self.path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        }
    }
}

/// A live duel plus the channel its lap results are pushed on.
pub struct DuelHandle {
    pub session: Mutex<DuelSession>,
    pub tx: broadcast::Sender<LapResult>,
}

pub struct AppState {
    pub env: Arc<EnvConfig>,
    pub agents_dir: PathBuf,
    pub agents: BTreeMap<String, AgentInfo>,
    /// Checkpoints that failed to load, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    matches: RwLock<Vec<Arc<MatchResult>>>,
    duels: RwLock<HashMap<u64, Arc<DuelHandle>>>,
    next_duel: AtomicU64,
}

impl AppState {
    /// Reads every checkpoint in `agents_dir`. Unreadable files are skipped
    /// and reported in [`Self::skipped`].
    pub fn load(agents_dir: impl AsRef<Path>, track: TrackConfig) -> Result<Self, ConsoleError> {
        let dir = agents_dir.as_ref();
        let expected = track.hash();
        let mut agents = BTreeMap::new();
        let mut skipped = Vec::new();
        for (id, path) in list_checkpoints(dir)? {
            match std::fs::read(&path).map_err(|e| e.to_string()).and_then(|b| decode(&b, None).map_err(|e| e.to_string())) {
                Ok(policy) => {
                    let track_hash = policy.track.hash();
                    let compatible = track_hash == expected;
                    agents.insert(id.clone(), AgentInfo { id, path, policy: Arc::new(policy), track_hash, compatible });
                }
                Err(e) => {
                    tracing::warn!(path = %path.display(), error = %e, "skipping checkpoint");
                    skipped.push((path, e));
                }
            }
        }
        Ok(Self {
            env: Arc::new(EnvConfig::new(track)),
            agents_dir: dir.to_path_buf(),
            agents,
            skipped,
            matches: RwLock::new(Vec::new()),
            duels: RwLock::new(HashMap::new()),
            next_duel: AtomicU64::new(1),
        })
    }

    pub fn agent(&self, id: &str) -> Result<&AgentInfo, ApiError> {
        self.agents.get(id).ok_or_else(|| ApiError::NotFound(format!("unknown agent '{id}'")))
    }

    /// Like [`Self::agent`] but refuses agents built for another track.
    pub fn raceable(&self, id: &str) -> Result<&AgentInfo, ApiError> {
        let a = self.agent(id)?;
        if !a.compatible {
            return Err(ApiError::Conflict(format!(
                "agent '{id}' was trained on track config {} but the server runs {}",
                a.track_hash,
                self.env.track.hash()
            )));
        }
        Ok(a)
    }

    pub fn store_match(&self, m: MatchResult) -> u64 {
        let mut all = self.matches.write().expect("match store");
        all.push(Arc::new(m));
        all.len() as u64
    }

    pub fn get_match(&self, id: u64) -> Result<Arc<MatchResult>, ApiError> {
        let all = self.matches.read().expect("match store");
        id.checked_sub(1)
            .and_then(|i| all.get(i as usize).cloned())
            .ok_or_else(|| ApiError::NotFound(format!("unknown match {id}")))
    }

    pub fn new_duel_id(&self) -> u64 {
        self.next_duel.fetch_add(1, Ordering::Relaxed)
    }

    pub fn insert_duel(&self, session: DuelSession) -> Arc<DuelHandle> {
        let id = session.id;
        let (tx, _) = broadcast::channel(128);
        let handle = Arc::new(DuelHandle { session: Mutex::new(session), tx });
        self.duels.write().expect("duel store").insert(id, handle.clone());
        handle
    }

    pub fn duel(&self, id: u64) -> Result<Arc<DuelHandle>, ApiError> {
        self.duels
            .read()
            .expect("duel store")
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown duel {id}")))
    }

    /// Persisted arena table, or an empty one when no arena has run yet.
    pub fn leaderboard(&self) -> Result<EloTable, ApiError> {
        let path = self.agents_dir.join(ARENA_FILE);
        if !path.exists() {
            return Ok(EloTable::default());
        }
        ArenaState::load(&path).map(|s| s.table).map_err(|e| ApiError::Internal(format!("reading {}: {e}", path.display())))
    }
}
