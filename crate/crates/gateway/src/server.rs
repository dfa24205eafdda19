//! Binding the router and running the executor loops.

use std::net::SocketAddr;
use std::time::Duration;

use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::api::router;
use crate::config::ServiceConfig;
use crate::state::{AppState, BootError, GatewayClock};

pub struct ServerHandle {
    pub local_addr: SocketAddr,
    pub state: AppState,
    shutdown: Option<oneshot::Sender<()>>,
    server: JoinHandle<std::io::Result<()>>,
    loops: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        for l in &self.loops {
            l.abort();
        }
        self.server.await.unwrap_or_else(|e| Err(std::io::Error::other(e)))
    }
}

/// Boots from `config` and starts serving. Under the real-time clock the
/// scan and reconcile loops run on their configured intervals; under the
/// virtual clock they run only on `POST /clock/advance`.
pub async fn serve(config: ServiceConfig) -> Result<ServerHandle, BootError> {
    let state = AppState::boot(&config)?;
    let listener = TcpListener::bind(&config.listen_address)
        .await
        .map_err(|e| BootError::Bind { addr: config.listen_address.clone(), message: e.to_string() })?;
    let local_addr = listener
        .local_addr()
        .map_err(|e| BootError::Bind { addr: config.listen_address.clone(), message: e.to_string() })?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(state.clone());
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    let mut loops = Vec::new();
    if matches!(state.clock, GatewayClock::Real) {
        let s = state.clone();
        loops.push(spawn_loop(config.executor.scan_interval_secs, move || {
            if let Err(e) = s.scan() {
                tracing::error!(error = %e, "scan cycle failed");
            }
        }));
        let s = state.clone();
        loops.push(spawn_loop(config.executor.reconcile_interval_secs, move || {
            if let Err(e) = s.reconcile() {
                tracing::error!(error = %e, "reconcile cycle failed");
            }
        }));
    }
    tracing::info!(%local_addr, "serving");
    Ok(ServerHandle { local_addr, state, shutdown: Some(tx), server, loops })
}

fn spawn_loop(secs: u64, mut f: impl FnMut() + Send + 'static) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(secs.max(1)));
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tick.tick().await;
            f();
        }
    })
}
