//! HTTP/JSON service and command-line front end over `blockrag-core`.

pub mod config;
pub mod error;
pub mod jobs;
pub mod routes;

use std::sync::Arc;

use anyhow::Context;
use blockrag_core::Engine;

pub use config::ServerConfig;
pub use error::{ApiError, ApiErrorCode};
pub use routes::{router, AppState};

/// Binds `config.host:config.port` and serves until interrupted.
pub async fn serve(config: ServerConfig, engine: Engine) -> anyhow::Result<()> {
    let state = AppState::new(Arc::new(engine), config.ingest_workers);
    let addr = format!("{}:{}", config.host, config.port);
    let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
    tracing::info!(%addr, data_dir = %config.data_dir.display(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
