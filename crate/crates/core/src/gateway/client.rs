//! Adapter side: dial the orchestrator, authenticate, serve requests, and
//! reconnect with backoff when the connection drops.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpStream;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

use super::frame::{FrameDecoder, MessageType};
use super::link::{read_frame, write_frame, Link, Serving, Timings};
use super::now_ms;
use super::session::{hello, reconnect_delay, AdapterSession, Handler};

#[derive(Debug, Clone)]
pub struct AdapterConfig {
    pub addr: String,
    pub adapter_id: String,
    pub token: String,
    pub timings: Timings,
}

impl AdapterConfig {
    pub fn new(
        addr: impl Into<String>,
        adapter_id: impl Into<String>,
        token: impl Into<String>,
    ) -> Self {
        Self {
            addr: addr.into(),
            adapter_id: adapter_id.into(),
            token: token.into(),
            timings: Timings::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("orchestrator rejected the token")]
    AuthFailed,
    #[error("handshake failed: {0}")]
    Handshake(String),
}

/// Running adapter. The session, and with it the replay cache, survives
/// reconnects.
pub struct AdapterHandle {
    session: Arc<AdapterSession>,
    connections: Arc<AtomicU64>,
    link: Arc<Mutex<Option<Arc<Link>>>>,
    stop: watch::Sender<bool>,
    task: Mutex<Option<JoinHandle<Result<(), AdapterError>>>>,
}

impl AdapterHandle {
    pub fn session(&self) -> &Arc<AdapterSession> {
        &self.session
    }

    /// Number of successful handshakes so far.
    pub fn connections(&self) -> u64 {
        self.connections.load(Ordering::Relaxed)
    }

    pub fn link(&self) -> Option<Arc<Link>> {
        self.link
            .lock()
            .expect("link lock")
            .clone()
            .filter(|l| !l.is_closed())
    }

    /// Stops dialing and closes the current connection.
    pub fn shutdown(&self) {
        self.stop.send_replace(true);
        if let Some(l) = self.link.lock().expect("link lock").take() {
            l.close();
        }
    }

    /// Waits for the dial loop to end (after `shutdown` or a rejected token).
    pub async fn join(&self) -> Result<(), AdapterError> {
        let task = self.task.lock().expect("task lock").take();
        match task {
            Some(t) => t.await.unwrap_or(Ok(())),
            None => Ok(()),
        }
    }
}

impl Drop for AdapterHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn run_adapter(config: AdapterConfig, handler: Arc<dyn Handler>) -> AdapterHandle {
    let session = Arc::new(AdapterSession::new(
        config.adapter_id.clone(),
        config.token.clone(),
    ));
    let connections = Arc::new(AtomicU64::new(0));
    let link = Arc::new(Mutex::new(None));
    let (stop, stop_rx) = watch::channel(false);
    let task = tokio::spawn(dial_loop(
        config,
        handler,
        session.clone(),
        connections.clone(),
        link.clone(),
        stop_rx,
    ));
    AdapterHandle {
        session,
        connections,
        link,
        stop,
        task: Mutex::new(Some(task)),
    }
}

async fn dial_loop(
    config: AdapterConfig,
    handler: Arc<dyn Handler>,
    session: Arc<AdapterSession>,
    connections: Arc<AtomicU64>,
    current: Arc<Mutex<Option<Arc<Link>>>>,
    mut stop: watch::Receiver<bool>,
) -> Result<(), AdapterError> {
    let mut attempt: u32 = 0;
    let capabilities = handler.capabilities();
    loop {
        if *stop.borrow() {
            return Ok(());
        }
        match connect_once(
            &config,
            &capabilities,
            handler.clone(),
            session.clone(),
            connections.as_ref(),
        )
        .await
        {
            Ok(link) => {
                attempt = 0;
                *current.lock().expect("link lock") = Some(link.clone());
                tokio::select! {
                    _ = link.closed() => info!(adapter = %config.adapter_id, "connection lost"),
                    _ = stop.wait_for(|s| *s) => {
                        link.close();
                        return Ok(());
                    }
                }
            }
            Err(ConnectError::Fatal(e)) => {
                warn!(adapter = %config.adapter_id, error = %e, "giving up");
                return Err(e);
            }
            Err(ConnectError::Retry(reason)) => {
                debug!(adapter = %config.adapter_id, %reason, attempt, "dial failed")
            }
        }
        let delay = Duration::from_millis(reconnect_delay(attempt));
        attempt = attempt.saturating_add(1);
        tokio::select! {
            _ = tokio::time::sleep(delay) => {}
            _ = stop.wait_for(|s| *s) => return Ok(()),
        }
    }
}

enum ConnectError {
    Retry(String),
    Fatal(AdapterError),
}

async fn connect_once(
    config: &AdapterConfig,
    capabilities: &[String],
    handler: Arc<dyn Handler>,
    session: Arc<AdapterSession>,
    connections: &AtomicU64,
) -> Result<Arc<Link>, ConnectError> {
    let retry = |e: std::io::Error| ConnectError::Retry(e.to_string());
    let mut stream = TcpStream::connect(&config.addr).await.map_err(retry)?;
    let _ = stream.set_nodelay(true);
    let n = connections.load(Ordering::Relaxed);
    let label = format!("{}-c{n}", config.adapter_id);
    write_frame(
        &mut stream,
        &hello(
            &format!("{label}-hello"),
            &config.adapter_id,
            &config.token,
            capabilities,
            now_ms(),
        ),
    )
    .await
    .map_err(retry)?;
    let mut decoder = FrameDecoder::default();
    let mut backlog = Vec::new();
    let reply = tokio::time::timeout(
        config.timings.dead_after,
        read_frame(&mut stream, &mut decoder, &mut backlog),
    )
    .await
    .map_err(|_| ConnectError::Retry("no WELCOME".into()))?
    .map_err(retry)?;
    match reply.msg_type {
        MessageType::Welcome => {}
        MessageType::Err if reply.str_field("code") == Some("auth_failed") => {
            return Err(ConnectError::Fatal(AdapterError::AuthFailed));
        }
        other => {
            let detail = reply.str_field("code").unwrap_or(other.as_str()).to_owned();
            return Err(ConnectError::Fatal(AdapterError::Handshake(detail)));
        }
    }
    connections.fetch_add(1, Ordering::Relaxed);
    info!(adapter = %config.adapter_id, session = reply.str_field("session_id").unwrap_or(""), "connected");
    session.touch(now_ms());
    Ok(Link::spawn(
        label,
        stream,
        decoder,
        backlog,
        Some(Serving { session, handler }),
        None,
        config.timings,
    ))
}
