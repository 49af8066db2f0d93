//! HTTP and WebSocket service for matches, live duels against an agent,
//! stateless recommendations and the arena leaderboard.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use gridwall_core::checkpoint::CheckpointError;
use gridwall_core::track::TrackConfig;
use thiserror::Error;

pub mod api;
pub mod duel;
pub mod error;
pub mod state;

pub use api::router;
pub use state::AppState;

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Error)]
pub enum ConsoleError {
    #[error("agents directory: {0}")]
    Agents(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub agents_dir: PathBuf,
    pub track: TrackConfig,
}

impl ServeConfig {
    pub fn new(port: u16, agents_dir: impl Into<PathBuf>, track: TrackConfig) -> Self {
        Self { addr: SocketAddr::from(([127, 0, 0, 1], port)), agents_dir: agents_dir.into(), track }
    }
}

/// Loads the agents and serves until the process is stopped.
pub async fn serve(cfg: ServeConfig) -> Result<(), ConsoleError> {
    let state = Arc::new(AppState::load(&cfg.agents_dir, cfg.track)?);
    tracing::info!(agents = state.agents.len(), skipped = state.skipped.len(), "agents loaded");
    let listener = tokio::net::TcpListener::bind(cfg.addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state)).await?;
    Ok(())
}
