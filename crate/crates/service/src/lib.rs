//! Enrollment, verification, search and adjudication over HTTP/JSON.

pub mod api;
pub mod cases;
pub mod config;
pub mod engine;
pub mod error;
pub mod store;

use std::future::Future;
use std::sync::Arc;

use tokio::net::TcpListener;

pub use api::router;
pub use cases::{AdjudicationCase, CaseDecision, CaseState};
pub use config::ServiceConfig;
pub use engine::{DedupEngine, EnrollOutcome, EnrollResult};
pub use error::ServiceError;

/// Opens the engine and binds the listen address. Failures here are
/// startup errors: bad config, missing gallery, busy port.
pub async fn start(config: &ServiceConfig) -> Result<(TcpListener, Arc<DedupEngine>), ServiceError> {
    let engine = {
        let config = config.clone();
        tokio::task::spawn_blocking(move || DedupEngine::open(&config))
            .await
            .map_err(|e| ServiceError::Config(e.to_string()))??
    };
    let listener = TcpListener::bind(&config.bind)
        .await
        .map_err(|e| std::io::Error::new(e.kind(), format!("cannot bind {}: {e}", config.bind)))?;
    Ok((listener, Arc::new(engine)))
}

/// Serves until `shutdown` resolves, then writes a final gallery snapshot.
pub async fn run(
    listener: TcpListener,
    engine: Arc<DedupEngine>,
    config: &ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let app = router(engine.clone(), config.ui_dir.clone());
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    tokio::task::spawn_blocking(move || engine.snapshot())
        .await
        .map_err(|e| ServiceError::Storage(e.to_string()))??;
    Ok(())
}

/// Starts the service and runs until interrupted.
pub async fn serve(config: &ServiceConfig) -> Result<(), ServiceError> {
    let (listener, engine) = start(config).await?;
    tracing::info!(addr = %listener.local_addr()?, gallery = engine.gallery_size(), "serving");
    run(listener, engine, config, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
