//! HTTP surface of the counterfactual annotation tool: the annotation API
//! driven by the web UI, and the protocol spoken by remote model adapters.

pub mod api;
pub mod background;
pub mod error;
pub mod ext;
pub mod registry;

use std::net::SocketAddr;
use std::sync::Arc;

pub use api::{router, AppState, DocumentView, GenerateResponse, ServiceConfig};
pub use background::BackgroundServer;
pub use error::{ApiError, ErrorBody};

/// Serves the API on `addr` until the process is stopped.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let state = AppState::open(config).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
