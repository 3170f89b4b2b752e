//! Orchestrator side of the gateway: accepts adapter connections, tracks
//! which adapter offers which capability, and issues requests with
//! retry-on-reconnect under a stable corr_id.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, watch};
use tracing::{info, warn};

use super::frame::{FrameDecoder, Message, MessageType};
use super::link::{read_frame, write_frame, Link, LinkError, Serving, Timings};
use super::now_ms;
use super::session::{AdapterSession, Handler, ServerHandshake};

pub const DEFAULT_GATEWAY_PORT: u16 = 7430;

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub token: String,
    pub timings: Timings,
    /// How long a request waits for an adapter offering its capability.
    pub adapter_wait: Duration,
    /// Transport attempts per request before giving up.
    pub max_attempts: u32,
}

impl GatewayConfig {
    pub fn new(token: impl Into<String>) -> Self {
        Self {
            token: token.into(),
            timings: Timings::default(),
            adapter_wait: Duration::from_secs(30),
            max_attempts: 32,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("no adapter offers `{capability}`")]
    Unavailable { capability: String },
    #[error("`{op}` failed after {attempts} attempts")]
    RetriesExhausted { op: String, attempts: u32 },
    #[error("remote error {code}: {message}")]
    Remote { code: String, message: String },
    #[error("malformed response: {0}")]
    BadResponse(String),
}

struct AdapterEntry {
    link: Arc<Link>,
    capabilities: Vec<String>,
}

pub struct Gateway {
    config: GatewayConfig,
    adapters: Mutex<BTreeMap<String, AdapterEntry>>,
    sessions: Mutex<HashMap<String, Arc<AdapterSession>>>,
    changed: watch::Sender<u64>,
    corr: AtomicU64,
    sessions_opened: AtomicU64,
    inbound: Option<Arc<dyn Handler>>,
    events: mpsc::UnboundedSender<Message>,
    events_rx: Mutex<Option<mpsc::UnboundedReceiver<Message>>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("adapters", &self.adapter_ids())
            .finish()
    }
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Arc<Self> {
        Self::with_inbound(config, None)
    }

    /// `inbound` serves REQs that adapters send to the orchestrator.
    pub fn with_inbound(config: GatewayConfig, inbound: Option<Arc<dyn Handler>>) -> Arc<Self> {
        let (events, events_rx) = mpsc::unbounded_channel();
        Arc::new(Self {
            config,
            adapters: Mutex::new(BTreeMap::new()),
            sessions: Mutex::new(HashMap::new()),
            changed: watch::channel(0).0,
            corr: AtomicU64::new(0),
            sessions_opened: AtomicU64::new(0),
            inbound,
            events,
            events_rx: Mutex::new(Some(events_rx)),
        })
    }

    /// EVT frames from all adapters. Can be taken once.
    pub fn take_events(&self) -> Option<mpsc::UnboundedReceiver<Message>> {
        self.events_rx.lock().expect("events lock").take()
    }

    pub fn adapter_ids(&self) -> Vec<String> {
        self.adapters
            .lock()
            .expect("adapters lock")
            .keys()
            .cloned()
            .collect()
    }

    pub fn capabilities(&self) -> BTreeMap<String, Vec<String>> {
        self.adapters
            .lock()
            .expect("adapters lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.capabilities.clone()))
            .collect()
    }

    pub fn session(&self, adapter_id: &str) -> Option<Arc<AdapterSession>> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(adapter_id)
            .cloned()
    }

    /// Accept loop; runs until the listener fails.
    pub async fn serve(self: Arc<Self>, listener: TcpListener) -> std::io::Result<()> {
        loop {
            let (stream, peer) = listener.accept().await?;
            let _ = stream.set_nodelay(true);
            let gw = self.clone();
            tokio::spawn(async move {
                if let Err(e) = gw.accept(stream).await {
                    warn!(%peer, error = %e, "adapter connection rejected");
                }
            });
        }
    }

    /// Runs the handshake on `stream` and, on success, registers the adapter.
    pub async fn accept<S>(self: Arc<Self>, mut stream: S) -> std::io::Result<()>
    where
        S: AsyncRead + AsyncWrite + Send + Unpin + 'static,
    {
        let mut decoder = FrameDecoder::default();
        let mut backlog = Vec::new();
        let hello = tokio::time::timeout(
            self.config.timings.dead_after,
            read_frame(&mut stream, &mut decoder, &mut backlog),
        )
        .await
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::TimedOut, "no HELLO"))??;
        let n = self.sessions_opened.fetch_add(1, Ordering::Relaxed);
        let adapter_id = hello.str_field("adapter_id").unwrap_or("").to_owned();
        let session_id = format!("{adapter_id}-s{n}");
        let mut hs = ServerHandshake::default();
        let reply = hs.on_hello(
            &hello,
            &self.config.token,
            &format!("gw-hs{n}"),
            &session_id,
            now_ms(),
        );
        write_frame(&mut stream, &reply).await?;
        if reply.msg_type != MessageType::Welcome {
            return Err(std::io::Error::new(
                std::io::ErrorKind::PermissionDenied,
                reply
                    .str_field("code")
                    .unwrap_or("handshake failed")
                    .to_owned(),
            ));
        }
        let capabilities: Vec<String> = hello
            .payload
            .get("capabilities")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_str().map(str::to_owned))
                    .collect()
            })
            .unwrap_or_default();

        let session = self
            .sessions
            .lock()
            .expect("sessions lock")
            .entry(adapter_id.clone())
            .or_insert_with(|| {
                Arc::new(AdapterSession::new(
                    adapter_id.clone(),
                    self.config.token.clone(),
                ))
            })
            .clone();
        session.touch(now_ms());
        let serving = self
            .inbound
            .clone()
            .map(|handler| Serving { session, handler });
        let link = Link::spawn(
            format!("gw-{session_id}"),
            stream,
            decoder,
            backlog,
            serving,
            Some(self.events.clone()),
            self.config.timings,
        );
        info!(adapter = %adapter_id, ?capabilities, "adapter connected");
        let previous = self.adapters.lock().expect("adapters lock").insert(
            adapter_id.clone(),
            AdapterEntry {
                link: link.clone(),
                capabilities,
            },
        );
        if let Some(old) = previous {
            old.link.close();
        }
        self.changed.send_modify(|v| *v += 1);

        let gw = self.clone();
        tokio::spawn(async move {
            link.closed().await;
            gw.forget(&adapter_id, &link);
        });
        Ok(())
    }

    fn forget(&self, adapter_id: &str, link: &Arc<Link>) {
        let mut adapters = self.adapters.lock().expect("adapters lock");
        if adapters
            .get(adapter_id)
            .is_some_and(|e| Arc::ptr_eq(&e.link, link))
        {
            adapters.remove(adapter_id);
            drop(adapters);
            info!(adapter = %adapter_id, "adapter disconnected");
            self.changed.send_modify(|v| *v += 1);
        }
    }

    fn find(&self, capability: &str) -> Option<(String, Arc<Link>)> {
        self.adapters
            .lock()
            .expect("adapters lock")
            .iter()
            .find(|(_, e)| !e.link.is_closed() && e.capabilities.iter().any(|c| c == capability))
            .map(|(id, e)| (id.clone(), e.link.clone()))
    }

    async fn wait_for(&self, capability: &str) -> Option<(String, Arc<Link>)> {
        let mut rx = self.changed.subscribe();
        let deadline = tokio::time::Instant::now() + self.config.adapter_wait;
        loop {
            if let Some(found) = self.find(capability) {
                return Some(found);
            }
            if tokio::time::timeout_at(deadline, rx.changed())
                .await
                .is_err()
            {
                return None;
            }
        }
    }

    pub fn next_corr_id(&self) -> String {
        format!("gw-c{}", self.corr.fetch_add(1, Ordering::Relaxed))
    }

    /// Calls `op` on an adapter that offers it. On transport loss the same
    /// corr_id is re-sent once an adapter is back, so the remote side
    /// executes the request at most once.
    pub async fn call(&self, op: &str, args: Value) -> Result<Value, GatewayError> {
        let corr_id = self.next_corr_id();
        self.call_with(&corr_id, op, args).await
    }

    pub async fn call_with(
        &self,
        corr_id: &str,
        op: &str,
        args: Value,
    ) -> Result<Value, GatewayError> {
        for attempt in 1..=self.config.max_attempts {
            let Some((adapter_id, link)) = self.wait_for(op).await else {
                return Err(GatewayError::Unavailable {
                    capability: op.to_owned(),
                });
            };
            match link
                .request(
                    corr_id,
                    op,
                    args.clone(),
                    self.config.timings.request_timeout,
                )
                .await
            {
                Ok(msg) => return into_result(msg),
                Err(LinkError::Disconnected) => {
                    warn!(%op, %corr_id, attempt, "connection lost; retrying");
                    self.forget(&adapter_id, &link);
                }
                Err(LinkError::Timeout) => {
                    warn!(%op, %corr_id, attempt, "request timed out; retrying");
                }
            }
        }
        Err(GatewayError::RetriesExhausted {
            op: op.to_owned(),
            attempts: self.config.max_attempts,
        })
    }
}

fn into_result(msg: Message) -> Result<Value, GatewayError> {
    match msg.msg_type {
        MessageType::Rsp => msg
            .payload
            .get("result")
            .cloned()
            .ok_or_else(|| GatewayError::BadResponse("RSP without result".into())),
        MessageType::Err => Err(GatewayError::Remote {
            code: msg.str_field("code").unwrap_or("unknown").to_owned(),
            message: msg.str_field("message").unwrap_or("").to_owned(),
        }),
        other => Err(GatewayError::BadResponse(format!("unexpected {other}"))),
    }
}
