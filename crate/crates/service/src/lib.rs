//! HTTP API over the stopline pipeline.
//!
//! Every operation the web UI performs is an endpoint here, so the whole
//! workflow can be scripted without a browser:
//!
//! | method | path                                  | purpose                              |
//! |--------|---------------------------------------|--------------------------------------|
//! | GET    | `/health`                             | liveness                             |
//! | GET    | `/sites`                              | list site ids                        |
//! | POST   | `/sites`                              | create a site, optionally fetch ortho|
//! | GET    | `/sites/{id}`                         | site record                          |
//! | PUT/GET| `/sites/{id}/pairs`                   | correspondence set                   |
//! | POST   | `/sites/{id}/estimate`                | robust homography, registered        |
//! | GET    | `/sites/{id}/overlay?alpha=`          | warped frame over the ortho, PNG     |
//! | PUT/GET| `/sites/{id}/annotations`             | stop bar and median                  |
//! | PUT/GET| `/sites/{id}/camera-frame`            | representative camera frame          |
//! | PUT/GET| `/sites/{id}/ortho`                   | orthoimage (multipart with world file)|
//! | POST   | `/sites/{id}/ingest`                  | multipart detections + metadata      |
//! | GET    | `/sites/{id}/tracks`                  | stored trajectories                  |
//! | GET    | `/sites/{id}/events`                  | stored braking events                |
//! | GET    | `/sites/{id}/reports/{product}`       | analytics product, JSON or CSV       |
//! | GET    | `/sites/{id}/export/{table}`          | sink-schema NDJSON                   |
//!
//! Errors are JSON [`ApiError`] bodies. Writes to one site are serialised
//! by a per-site mutex; reads only take the store's shared lock.

mod error;
mod handlers;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post};
use axum::Router;
use tower_http::services::ServeDir;

use stopline_core::config::AppConfig;
use stopline_core::ortho::{HttpImagery, ImagerySource};
use stopline_core::store::{Store, StoreError};

pub use error::ApiError;

/// Uploads (detections, rasters) can be large.
const BODY_LIMIT: usize = 512 * 1024 * 1024;

pub struct AppState {
    pub config: AppConfig,
    store: RwLock<Store>,
    imagery: Option<Arc<dyn ImagerySource>>,
    site_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl AppState {
    /// Opens the store named in `config` as its single writer.
    pub fn new(config: AppConfig, imagery: Option<Arc<dyn ImagerySource>>) -> Result<Self, StoreError> {
        let store = Store::open(&config.store_dir)?;
        Ok(Self {
            config,
            store: RwLock::new(store),
            imagery,
            site_locks: Mutex::new(HashMap::new()),
        })
    }

    /// Uses the configured HTTP endpoint, if any, as the imagery source.
    pub fn from_config(config: AppConfig) -> Result<Self, StoreError> {
        let imagery: Option<Arc<dyn ImagerySource>> = if config.imagery.endpoint.is_empty() {
            None
        } else {
            Some(Arc::new(HttpImagery::new(config.imagery.endpoint.clone(), config.imagery.timeout())))
        };
        Self::new(config, imagery)
    }

    fn site_lock(&self, site_id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.site_locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(site_id.to_string()).or_default().clone()
    }

    /// Runs `f` with shared access to the store.
    fn read<T>(&self, f: impl FnOnce(&Store) -> T) -> T {
        f(&self.store.read().unwrap_or_else(|e| e.into_inner()))
    }

    /// Runs `f` with exclusive access, holding the site's write lock.
    fn write<T>(&self, site_id: &str, f: impl FnOnce(&mut Store) -> T) -> T {
        let lock = self.site_lock(site_id);
        let _site = lock.lock().unwrap_or_else(|e| e.into_inner());
        f(&mut self.store.write().unwrap_or_else(|e| e.into_inner()))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let static_dir = state.config.static_dir.clone();
    let api = Router::new()
        .route("/health", get(handlers::health))
        .route("/sites", get(handlers::list_sites).post(handlers::create_site))
        .route("/sites/{id}", get(handlers::get_site))
        .route("/sites/{id}/pairs", get(handlers::get_pairs).put(handlers::put_pairs))
        .route("/sites/{id}/estimate", post(handlers::estimate))
        .route("/sites/{id}/overlay", get(handlers::overlay))
        .route("/sites/{id}/annotations", get(handlers::get_annotations).put(handlers::put_annotations))
        .route("/sites/{id}/camera-frame", get(handlers::get_camera_frame).put(handlers::put_camera_frame))
        .route("/sites/{id}/ortho", get(handlers::get_ortho).put(handlers::put_ortho))
        .route("/sites/{id}/ingest", post(handlers::ingest))
        .route("/sites/{id}/tracks", get(handlers::tracks))
        .route("/sites/{id}/events", get(handlers::events))
        .route("/sites/{id}/reports/{product}", get(handlers::report))
        .route("/sites/{id}/export/{table}", get(handlers::export))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid listen address '{0}'")]
    Listen(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binds `config.listen` and serves until the process is stopped.
pub async fn serve(config: AppConfig) -> Result<(), ServeError> {
    let addr: SocketAddr = config.listen.parse().map_err(|_| ServeError::Listen(config.listen.clone()))?;
    let state = Arc::new(AppState::from_config(config)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state)).await?;
    Ok(())
}
