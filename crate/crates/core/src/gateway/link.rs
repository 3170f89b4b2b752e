//! One established, post-handshake connection: a reader and a writer task,
//! keepalive, and corr_id-matched request/response multiplexing in both
//! directions.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::Value;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::sync::{mpsc, oneshot, watch};
use tracing::{debug, warn};

use super::frame::{encode_frame, FrameDecoder, FrameError, Message, MessageType};
use super::now_ms;
use super::session::{dispatch_request, err_message, request, AdapterSession, Handler};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timings {
    pub ping_interval: Duration,
    pub dead_after: Duration,
    pub request_timeout: Duration,
}

impl Default for Timings {
    fn default() -> Self {
        Self {
            ping_interval: Duration::from_secs(5),
            dead_after: Duration::from_secs(15),
            request_timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LinkError {
    #[error("connection closed")]
    Disconnected,
    #[error("request timed out")]
    Timeout,
}

/// Requests arriving on this link and who serves them.
#[derive(Clone)]
pub struct Serving {
    pub session: Arc<AdapterSession>,
    pub handler: Arc<dyn Handler>,
}

pub struct Link {
    label: String,
    outbound: mpsc::UnboundedSender<Message>,
    pending: Mutex<HashMap<String, oneshot::Sender<Message>>>,
    closed: watch::Sender<bool>,
    next_id: AtomicU64,
    last_seen: AtomicU64,
    events: Option<mpsc::UnboundedSender<Message>>,
}

impl std::fmt::Debug for Link {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Link")
            .field("label", &self.label)
            .field("closed", &self.is_closed())
            .finish()
    }
}

impl Link {
    /// Starts the reader, writer and keepalive tasks over `stream`.
    /// `decoder` and `backlog` carry bytes and frames already read past the
    /// handshake.
    pub fn spawn<S>(
        label: impl Into<String>,
        stream: S,
        decoder: FrameDecoder,
        backlog: Vec<Message>,
        serving: Option<Serving>,
        events: Option<mpsc::UnboundedSender<Message>>,
        timings: Timings,
    ) -> Arc<Link>
    where
        S: AsyncRead + AsyncWrite + Send + Unpin + 'static,
    {
        let (outbound, rx) = mpsc::unbounded_channel();
        let link = Arc::new(Link {
            label: label.into(),
            outbound,
            pending: Mutex::new(HashMap::new()),
            closed: watch::channel(false).0,
            next_id: AtomicU64::new(0),
            last_seen: AtomicU64::new(now_ms()),
            events,
        });
        let (reader, writer) = tokio::io::split(stream);
        tokio::spawn(write_loop(link.clone(), writer, rx));
        tokio::spawn(read_loop(link.clone(), reader, decoder, backlog, serving));
        tokio::spawn(keepalive(link.clone(), timings));
        link
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn next_id(&self) -> String {
        format!(
            "{}-{}",
            self.label,
            self.next_id.fetch_add(1, Ordering::Relaxed)
        )
    }

    pub fn is_closed(&self) -> bool {
        *self.closed.borrow()
    }

    /// Resolves once the link is torn down.
    pub async fn closed(&self) {
        let mut rx = self.closed.subscribe();
        let _ = rx.wait_for(|c| *c).await;
    }

    pub fn close(&self) {
        self.closed.send_replace(true);
        // Dropping the senders wakes every waiter with `Disconnected`.
        self.pending.lock().expect("pending lock").clear();
    }

    pub fn send(&self, msg: Message) -> Result<(), LinkError> {
        if self.is_closed() {
            return Err(LinkError::Disconnected);
        }
        self.outbound.send(msg).map_err(|_| LinkError::Disconnected)
    }

    /// Sends a REQ with the given corr_id and waits for the matching RSP or ERR.
    pub async fn request(
        &self,
        corr_id: &str,
        op: &str,
        args: Value,
        timeout: Duration,
    ) -> Result<Message, LinkError> {
        let (tx, rx) = oneshot::channel();
        self.pending
            .lock()
            .expect("pending lock")
            .insert(corr_id.to_owned(), tx);
        if self.is_closed() {
            self.pending.lock().expect("pending lock").remove(corr_id);
            return Err(LinkError::Disconnected);
        }
        self.send(request(self.next_id(), corr_id, now_ms(), op, args))?;
        match tokio::time::timeout(timeout, rx).await {
            Ok(Ok(msg)) => Ok(msg),
            Ok(Err(_)) => Err(LinkError::Disconnected),
            Err(_) => {
                self.pending.lock().expect("pending lock").remove(corr_id);
                Err(LinkError::Timeout)
            }
        }
    }

    pub fn emit(&self, payload: serde_json::Map<String, Value>) -> Result<(), LinkError> {
        let mut m = Message::new(MessageType::Evt, self.next_id(), now_ms());
        m.payload = payload;
        self.send(m)
    }

    fn seen(&self) {
        self.last_seen.fetch_max(now_ms(), Ordering::Relaxed);
    }
}

async fn write_loop<W: AsyncWrite + Unpin>(
    link: Arc<Link>,
    mut writer: W,
    mut rx: mpsc::UnboundedReceiver<Message>,
) {
    let mut closed = link.closed.subscribe();
    loop {
        let msg = tokio::select! {
            m = rx.recv() => match m {
                Some(m) => m,
                None => break,
            },
            _ = closed.wait_for(|c| *c) => break,
        };
        let frame = match encode_frame(&msg) {
            Ok(f) => f,
            Err(FrameError::FrameTooLarge(n)) if msg.corr_id.is_some() => {
                warn!(link = %link.label, bytes = n, "response too large");
                let err = err_message(
                    &link.next_id(),
                    msg.corr_id.as_deref(),
                    msg.ts,
                    "frame_too_large",
                    "response exceeds frame limit",
                );
                encode_frame(&err).expect("small ERR frame encodes")
            }
            Err(e) => {
                warn!(link = %link.label, error = %e, "dropping unencodable frame");
                continue;
            }
        };
        if writer.write_all(&frame).await.is_err() || writer.flush().await.is_err() {
            break;
        }
    }
    let _ = writer.shutdown().await;
    link.close();
}

async fn read_loop<R: AsyncRead + Unpin>(
    link: Arc<Link>,
    mut reader: R,
    mut decoder: FrameDecoder,
    mut backlog: Vec<Message>,
    serving: Option<Serving>,
) {
    let mut closed = link.closed.subscribe();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        for msg in backlog.drain(..) {
            handle_incoming(&link, msg, serving.as_ref());
        }
        let n = tokio::select! {
            r = reader.read(&mut buf) => match r {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            },
            _ = closed.wait_for(|c| *c) => break,
        };
        match decoder.push(&buf[..n]) {
            Ok(msgs) => backlog = msgs,
            Err(e) => {
                warn!(link = %link.label, error = %e, "tearing down on bad frame");
                break;
            }
        }
    }
    debug!(link = %link.label, "reader finished");
    link.close();
}

fn handle_incoming(link: &Arc<Link>, msg: Message, serving: Option<&Serving>) {
    link.seen();
    if let Some(s) = serving {
        s.session.touch(now_ms());
    }
    match msg.msg_type {
        MessageType::Ping => {
            let pong = Message::new(MessageType::Pong, link.next_id(), now_ms()).with_corr(msg.id);
            let _ = link.send(pong);
        }
        MessageType::Pong => {}
        MessageType::Rsp | MessageType::Err => {
            let waiter = msg
                .corr_id
                .as_deref()
                .and_then(|c| link.pending.lock().expect("pending lock").remove(c));
            match waiter {
                Some(tx) => {
                    let _ = tx.send(msg);
                }
                None => debug!(link = %link.label, corr = ?msg.corr_id, "response without waiter"),
            }
        }
        MessageType::Req => match serving {
            Some(s) => {
                let (link, s) = (link.clone(), s.clone());
                tokio::spawn(async move {
                    let reply =
                        dispatch_request(&s.session, &msg, s.handler.clone(), now_ms()).await;
                    let _ = link.send(reply);
                });
            }
            None => {
                let err = err_message(
                    &link.next_id(),
                    msg.corr_id.as_deref(),
                    now_ms(),
                    "unsupported",
                    "this side serves no requests",
                );
                let _ = link.send(err);
            }
        },
        MessageType::Evt => {
            if let Some(tx) = &link.events {
                let _ = tx.send(msg);
            }
        }
        MessageType::Hello | MessageType::Welcome => {
            let err = err_message(
                &link.next_id(),
                None,
                now_ms(),
                "protocol_violation",
                "handshake frame on live session",
            );
            let _ = link.send(err);
        }
    }
}

async fn keepalive(link: Arc<Link>, timings: Timings) {
    let mut closed = link.closed.subscribe();
    let mut tick = tokio::time::interval(timings.ping_interval);
    tick.tick().await;
    loop {
        tokio::select! {
            _ = tick.tick() => {}
            _ = closed.wait_for(|c| *c) => return,
        }
        let silent_for = now_ms().saturating_sub(link.last_seen.load(Ordering::Relaxed));
        if silent_for > timings.dead_after.as_millis() as u64 {
            warn!(link = %link.label, silent_for, "peer declared dead");
            link.close();
            return;
        }
        if link
            .send(Message::new(MessageType::Ping, link.next_id(), now_ms()))
            .is_err()
        {
            return;
        }
    }
}

/// Reads exactly one frame, keeping any extra bytes in `decoder`.
pub async fn read_frame<R: AsyncRead + Unpin>(
    reader: &mut R,
    decoder: &mut FrameDecoder,
    pending: &mut Vec<Message>,
) -> std::io::Result<Message> {
    let mut buf = [0u8; 4096];
    loop {
        if !pending.is_empty() {
            return Ok(pending.remove(0));
        }
        let n = reader.read(&mut buf).await?;
        if n == 0 {
            return Err(std::io::ErrorKind::UnexpectedEof.into());
        }
        let msgs = decoder
            .push(&buf[..n])
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        pending.extend(msgs);
    }
}

pub async fn write_frame<W: AsyncWrite + Unpin>(
    writer: &mut W,
    msg: &Message,
) -> std::io::Result<()> {
    let frame =
        encode_frame(msg).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    writer.write_all(&frame).await?;
    writer.flush().await
}
