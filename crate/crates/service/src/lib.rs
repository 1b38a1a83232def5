//! HTTP API for browser-based cluster annotation and the round dashboard.
//!
//! Endpoints are listed in `API.md` next to this crate. State lives in a
//! data root (see [`layout`]); the service keeps open sessions in memory
//! and rebuilds them from their journals on startup.

pub mod config;
mod error;
pub mod ingest;
pub mod layout;
mod routes;
pub mod sessions;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::Router;

pub use config::ServiceConfig;
pub use error::ApiError;
pub use layout::DataRoot;
use sessions::SessionSlot;

pub struct AppState {
    pub config: ServiceConfig,
    pub root: DataRoot,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionSlot>>>>,
    /// Serialises session creation so concurrent creates stay idempotent.
    create_lock: Mutex<()>,
    /// Serialises round-state mutations; holds flag idempotency keys.
    rounds_lock: Mutex<HashMap<String, String>>,
}

impl AppState {
    /// Loads every committed session under the data root.
    pub fn open(config: ServiceConfig) -> std::io::Result<Self> {
        let root = DataRoot::new(&config.data_root);
        std::fs::create_dir_all(root.path())?;
        let mut sessions = HashMap::new();
        let dir = root.sessions_dir();
        if dir.is_dir() {
            for entry in std::fs::read_dir(&dir)? {
                let id = entry?.file_name().to_string_lossy().into_owned();
                match SessionSlot::load(&root, &id) {
                    Ok(Some(slot)) => {
                        tracing::info!(session = %id, events = slot.session.events().len(), "session restored");
                        sessions.insert(id, Arc::new(Mutex::new(slot)));
                    }
                    Ok(None) => tracing::warn!(session = %id, "skipping session directory without a committed journal"),
                    Err(e) => tracing::error!(session = %id, error = %e.message, "session could not be restored"),
                }
            }
        }
        Ok(Self { config, root, sessions: Mutex::new(sessions), create_lock: Mutex::new(()), rounds_lock: Mutex::new(HashMap::new()) })
    }

    fn session(&self, id: &str) -> Option<Arc<Mutex<SessionSlot>>> {
        self.sessions.lock().expect("session map poisoned").get(id).cloned()
    }

    fn insert_session(&self, id: String, slot: SessionSlot) -> Arc<Mutex<SessionSlot>> {
        let slot = Arc::new(Mutex::new(slot));
        self.sessions.lock().expect("session map poisoned").insert(id, slot.clone());
        slot
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    routes::router(state)
}

/// Binds, prints `listening on http://<addr>` to stdout, and serves until
/// ctrl-c or `shutdown` resolves.
pub async fn serve(config: ServiceConfig, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    serve_with(config, shutdown, |addr| println!("listening on http://{addr}")).await
}

/// Like [`serve`], reporting the bound address through `ready` instead.
pub async fn serve_with(
    config: ServiceConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ready: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let bind = format!("{}:{}", config.bind, config.port);
    let state = Arc::new(tokio::task::spawn_blocking(move || AppState::open(config)).await.map_err(std::io::Error::other)??);
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    let addr: SocketAddr = listener.local_addr()?;
    ready(addr);
    tracing::info!(%addr, root = %state.root.path().display(), "annotation service ready");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async move {
            tokio::select! {
                _ = shutdown => {}
                _ = tokio::signal::ctrl_c() => {}
            }
        })
        .await
}
