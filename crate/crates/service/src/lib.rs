//! Loopback HTTP control service for the extraction pipeline.
//!
//! One session holds the uploaded table, column mapping, schema, provider
//! configuration and per-row results. Runs execute in the background while
//! the control and read endpoints stay responsive; engine events are fanned
//! out to `/events` subscribers as server-sent events.

mod error;
mod routes;
mod session;

use std::fmt;
use std::net::SocketAddr;
use std::sync::Arc;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use error::{ApiError, ApiResult};
pub use routes::router;
pub use session::{AppState, ServiceConfig, API_KEY_ENV};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("refusing to bind {0}: the control service only listens on loopback addresses")]
    NotLoopback(SocketAddr),
    #[error("cannot bind control service: {0}")]
    Bind(#[from] std::io::Error),
}

/// A running control service. Dropping the handle stops it.
pub struct ServiceHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl fmt::Debug for ServiceHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServiceHandle").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    /// Serves until the task ends.
    pub async fn wait(mut self) {
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

/// Binds `addr` (which must be a loopback address) and serves `state`.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<ServiceHandle, ServiceError> {
    if !addr.ip().is_loopback() {
        return Err(ServiceError::NotLoopback(addr));
    }
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let app = router(state);
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let served = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
        if let Err(e) = served {
            tracing::error!("control service stopped: {e}");
        }
    });
    tracing::info!(%addr, "control service listening");
    Ok(ServiceHandle {
        addr,
        shutdown: Some(tx),
        task: Some(task),
    })
}
