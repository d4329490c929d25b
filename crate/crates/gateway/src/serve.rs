//! `dada serve`: HTTP API, event stream, bus client, window ticker and
//! optional trace playback.

use std::fs::File;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use dada_core::datapath::PacketEvent;
use dada_core::simulator::read_trace;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;

use crate::api::{lock, router, AppState, SharedGateway};
use crate::config::{parse_bus_endpoint, ConfigError, GatewayConfig};
use crate::gateway::{Gateway, GatewayError};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("trace {path}: {message}")]
    Trace { path: PathBuf, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Playback {
    pub trace: PathBuf,
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
}

/// Feeds a recorded trace into the gateway, shifted to start at the current
/// gateway clock and paced by `speed`.
async fn play(gateway: SharedGateway, events: Vec<PacketEvent>, speed: f64, mut shutdown: watch::Receiver<bool>) {
    let Some(first) = events.first().map(|e| e.ts) else {
        return;
    };
    let base = lock(&gateway).now();
    let start = tokio::time::Instant::now();
    let mut i = 0;
    while i < events.len() {
        let due = Duration::from_secs_f64(events[i].ts.saturating_sub(first) as f64 / 1e6 / speed);
        tokio::select! {
            _ = tokio::time::sleep_until(start + due) => {}
            _ = shutdown.changed() => return,
        }
        let elapsed = start.elapsed().as_secs_f64() * speed * 1e6;
        let mut g = lock(&gateway);
        while i < events.len() && events[i].ts.saturating_sub(first) as f64 <= elapsed {
            let mut e = events[i].clone();
            e.ts = base + e.ts.saturating_sub(first);
            if let Err(err) = g.ingest(e) {
                tracing::warn!("trace packet {i}: {err}");
            }
            i += 1;
        }
    }
    tracing::info!(packets = events.len(), "trace playback finished");
}

async fn ticker(gateway: SharedGateway, mut shutdown: watch::Receiver<bool>) {
    let mut interval = tokio::time::interval(Duration::from_secs(1));
    loop {
        tokio::select! {
            _ = interval.tick() => {}
            _ = shutdown.changed() => return,
        }
        if let Err(e) = lock(&gateway).tick() {
            tracing::warn!("tick: {e}");
        }
    }
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

/// Serves `gateway` on `listener` until `stop` resolves, then flushes due
/// windows.
pub async fn run(
    gateway: SharedGateway,
    listener: TcpListener,
    bus: Option<(String, u16)>,
    trace: Option<(Vec<PacketEvent>, f64)>,
    stop: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let (stop_tx, stop_rx) = watch::channel(false);
    let mut tasks = vec![tokio::spawn(ticker(gateway.clone(), stop_rx.clone()))];
    if let Some((host, port)) = bus {
        tasks.push(tokio::spawn(crate::bus::run(
            gateway.clone(),
            host,
            port,
            stop_rx.clone(),
        )));
    }
    if let Some((events, speed)) = trace {
        tasks.push(tokio::spawn(play(gateway.clone(), events, speed, stop_rx.clone())));
    }
    let app = router(AppState {
        gateway: gateway.clone(),
        shutdown: stop_rx,
    });
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            stop.await;
            tracing::info!("shutting down");
            let _ = stop_tx.send(true);
        })
        .await?;
    for t in tasks {
        let _ = t.await;
    }
    lock(&gateway).tick()?;
    Ok(())
}

/// Opens the gateway from `config` and runs it until `stop` resolves.
/// Prints `listening on <addr>` once bound.
pub async fn serve_until(
    config: GatewayConfig,
    playback: Option<Playback>,
    stop: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let trace = match playback {
        Some(p) => {
            let file = File::open(&p.trace)?;
            let events = read_trace(BufReader::new(file)).map_err(|e| ServeError::Trace {
                path: p.trace.clone(),
                message: e.to_string(),
            })?;
            Some((events, p.speed))
        }
        None => None,
    };
    let bus = config.bus.as_deref().map(parse_bus_endpoint).transpose()?;
    let listen = config.listen;
    let gateway: SharedGateway = Arc::new(Mutex::new(Gateway::open(config)?));
    let listener = TcpListener::bind(listen).await?;
    let addr: SocketAddr = listener.local_addr()?;
    println!("listening on {addr}");
    run(gateway, listener, bus, trace, stop).await
}

/// Runs until SIGINT or SIGTERM.
pub async fn serve(config: GatewayConfig, playback: Option<Playback>) -> Result<(), ServeError> {
    serve_until(config, playback, shutdown_signal()).await
}
