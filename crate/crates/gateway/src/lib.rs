//! Network face of the parley chat research platform: the `/ws` chat
//! endpoint, the study administration API, and static assets at `/`.
//!
//! ```no_run
//! # async fn run() -> Result<(), Box<dyn std::error::Error>> {
//! let config = parley_gateway::GatewayConfig::new("data", "admin-secret");
//! let gateway = parley_gateway::start(config).await?;
//! println!("listening on {}", gateway.local_addr());
//! gateway.wait().await?;
//! # Ok(())
//! # }
//! ```

pub mod api;
pub mod config;
pub mod hub;
pub mod tls;
mod ws;

use std::future::IntoFuture;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::serve::ListenerExt;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub use api::{router, CreateSessionRequest};
pub use config::{ConfigError, GatewayConfig, TlsConfig};
pub use hub::{CreatedSession, Hub, HubConfig, HubError, IssuedToken, ParticipantSpec, SessionStatus};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error(transparent)]
    Tls(#[from] tls::TlsError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
}

/// A running gateway.
pub struct Gateway {
    local_addr: SocketAddr,
    tls: bool,
    hub: Arc<Hub>,
    task: JoinHandle<io::Result<()>>,
}

/// Validates `config`, restores sessions from `data_dir`, binds and starts
/// serving in the background.
pub async fn start(config: GatewayConfig) -> Result<Gateway, GatewayError> {
    config.validate()?;
    let tls_config = match &config.tls {
        Some(t) => Some(tls::load_server_config(&t.cert, &t.key)?),
        None => None,
    };
    let hub = Hub::load(HubConfig {
        data_dir: config.data_dir.clone(),
        fsync: config.fsync,
        tick_ms: config.session_tick_ms,
        queue_capacity: config.queue_capacity,
    })?;
    let listener = TcpListener::bind(&config.bind_address)
        .await
        .map_err(|source| GatewayError::Bind {
            addr: config.bind_address.clone(),
            source,
        })?;
    let local_addr = listener.local_addr().map_err(|source| GatewayError::Bind {
        addr: config.bind_address.clone(),
        source,
    })?;
    let app = router(hub.clone(), &config.admin_token, config.static_dir.clone());
    let mut stop = hub.shutdown_signal();
    let stopped = async move {
        let _ = stop.wait_for(|s| *s).await;
    };
    let task = match tls_config {
        Some(tls_config) => {
            let listener = tls::TlsListener::new(listener, tls_config)
                .map_err(|source| GatewayError::Bind {
                    addr: config.bind_address.clone(),
                    source,
                })?;
            let serve = axum::serve(listener, app).with_graceful_shutdown(stopped);
            tokio::spawn(serve.into_future())
        }
        None => {
            // chat frames are small and latency bound
            let listener = listener.tap_io(|tcp| {
                let _ = tcp.set_nodelay(true);
            });
            let serve = axum::serve(listener, app).with_graceful_shutdown(stopped);
            tokio::spawn(serve.into_future())
        }
    };
    tracing::info!(%local_addr, tls = config.tls.is_some(), "gateway listening");
    Ok(Gateway {
        local_addr,
        tls: config.tls.is_some(),
        hub,
        task,
    })
}

impl Gateway {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// `ws://host:port/ws`, or `wss://` with TLS.
    pub fn ws_url(&self) -> String {
        let scheme = if self.tls { "wss" } else { "ws" };
        format!("{scheme}://{}/ws", self.local_addr)
    }

    /// `http://host:port`, or `https://` with TLS.
    pub fn http_url(&self) -> String {
        let scheme = if self.tls { "https" } else { "http" };
        format!("{scheme}://{}", self.local_addr)
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    /// Runs until the server stops.
    pub async fn wait(self) -> io::Result<()> {
        match self.task.await {
            Ok(r) => r,
            Err(e) => Err(io::Error::other(e)),
        }
    }

    /// Stops session actors, closes every connection and the listener.
    pub async fn shutdown(self) {
        self.hub.shutdown();
        let abort = self.task.abort_handle();
        if tokio::time::timeout(Duration::from_secs(5), self.task).await.is_err() {
            abort.abort();
        }
    }
}
