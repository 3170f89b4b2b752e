//! Handshake, idempotent request dispatch and reconnect backoff.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};
use tokio::sync::OnceCell;

use super::frame::{Message, MessageType};

pub const REPLAY_CACHE_CAPACITY: usize = 256;

/// Error reported by a request handler; becomes an ERR frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandlerError {
    pub code: String,
    pub message: String,
}

impl HandlerError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn bad_args(message: impl Into<String>) -> Self {
        Self::new("bad_args", message)
    }
}

impl std::fmt::Display for HandlerError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

/// Serves REQ frames. `handle` may block; callers run it off the reactor.
pub trait Handler: Send + Sync + 'static {
    fn capabilities(&self) -> Vec<String>;
    fn handle(&self, op: &str, args: &Value) -> Result<Value, HandlerError>;
}

/// Bounded corr_id -> response cache. Each entry is a once-cell so a
/// duplicate arriving while the first execution is still running waits for
/// it instead of running the handler again.
#[derive(Debug)]
pub struct ReplayCache {
    capacity: usize,
    order: VecDeque<String>,
    entries: HashMap<String, Arc<OnceCell<Message>>>,
}

impl Default for ReplayCache {
    fn default() -> Self {
        Self::with_capacity(REPLAY_CACHE_CAPACITY)
    }
}

impl ReplayCache {
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            order: VecDeque::new(),
            entries: HashMap::new(),
        }
    }

    /// Returns the cell for `corr_id` and whether it already existed.
    fn slot(&mut self, corr_id: &str) -> (Arc<OnceCell<Message>>, bool) {
        if let Some(cell) = self.entries.get(corr_id) {
            return (cell.clone(), true);
        }
        let cell = Arc::new(OnceCell::new());
        self.entries.insert(corr_id.to_owned(), cell.clone());
        self.order.push_back(corr_id.to_owned());
        while self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.entries.remove(&old);
            }
        }
        (cell, false)
    }

    pub fn get(&self, corr_id: &str) -> Option<Message> {
        self.entries.get(corr_id).and_then(|c| c.get().cloned())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-peer session state that outlives individual connections.
#[derive(Debug)]
pub struct AdapterSession {
    pub adapter_id: String,
    pub token: String,
    last_seen: AtomicU64,
    replay_cache: Mutex<ReplayCache>,
    executions: Mutex<HashMap<String, u64>>,
    replays: AtomicU64,
    next_id: AtomicU64,
}

impl AdapterSession {
    pub fn new(adapter_id: impl Into<String>, token: impl Into<String>) -> Self {
        Self {
            adapter_id: adapter_id.into(),
            token: token.into(),
            last_seen: AtomicU64::new(0),
            replay_cache: Mutex::new(ReplayCache::default()),
            executions: Mutex::new(HashMap::new()),
            replays: AtomicU64::new(0),
            next_id: AtomicU64::new(0),
        }
    }

    pub fn touch(&self, ts: u64) {
        self.last_seen.fetch_max(ts, Ordering::Relaxed);
    }

    pub fn last_seen(&self) -> u64 {
        self.last_seen.load(Ordering::Relaxed)
    }

    /// Handler executions per corr_id.
    pub fn executions(&self) -> HashMap<String, u64> {
        self.executions.lock().expect("executions lock").clone()
    }

    pub fn total_executions(&self) -> u64 {
        self.executions
            .lock()
            .expect("executions lock")
            .values()
            .sum()
    }

    /// Duplicate requests answered from the cache.
    pub fn replays(&self) -> u64 {
        self.replays.load(Ordering::Relaxed)
    }

    pub fn cached_response(&self, corr_id: &str) -> Option<Message> {
        self.replay_cache
            .lock()
            .expect("replay cache lock")
            .get(corr_id)
    }

    fn response_id(&self) -> String {
        format!(
            "{}-r{}",
            self.adapter_id,
            self.next_id.fetch_add(1, Ordering::Relaxed)
        )
    }
}

fn tokens_match(a: &str, b: &str) -> bool {
    let (a, b) = (a.as_bytes(), b.as_bytes());
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

pub fn err_message(id: &str, corr_id: Option<&str>, ts: u64, code: &str, message: &str) -> Message {
    let mut m = Message::new(MessageType::Err, id, ts)
        .with("code", code)
        .with("message", message);
    m.corr_id = corr_id.map(str::to_owned);
    m
}

/// Answers a HELLO with WELCOME or an `auth_failed` / `protocol_violation` ERR.
pub fn handshake(
    hello: &Message,
    expected_token: &str,
    reply_id: &str,
    session_id: &str,
    ts: u64,
) -> Message {
    if hello.msg_type != MessageType::Hello {
        return err_message(
            reply_id,
            None,
            ts,
            "protocol_violation",
            "first frame must be HELLO",
        );
    }
    let Some(adapter_id) = hello.str_field("adapter_id").filter(|s| !s.is_empty()) else {
        return err_message(
            reply_id,
            None,
            ts,
            "protocol_violation",
            "HELLO without adapter_id",
        );
    };
    let token = hello.str_field("token").unwrap_or("");
    if !tokens_match(token, expected_token) {
        return err_message(reply_id, None, ts, "auth_failed", "bad token");
    }
    Message::new(MessageType::Welcome, reply_id, ts)
        .with("session_id", session_id)
        .with("adapter_id", adapter_id)
}

/// Handshake state of one accepted connection.
#[derive(Debug, Default)]
pub struct ServerHandshake {
    session_id: Option<String>,
}

impl ServerHandshake {
    pub fn is_live(&self) -> bool {
        self.session_id.is_some()
    }

    pub fn on_hello(
        &mut self,
        hello: &Message,
        expected_token: &str,
        reply_id: &str,
        session_id: &str,
        ts: u64,
    ) -> Message {
        if self.session_id.is_some() {
            return err_message(
                reply_id,
                None,
                ts,
                "protocol_violation",
                "session already established",
            );
        }
        let reply = handshake(hello, expected_token, reply_id, session_id, ts);
        if reply.msg_type == MessageType::Welcome {
            self.session_id = Some(session_id.to_owned());
        }
        reply
    }
}

/// Parses the `{op, args}` body of a REQ.
pub fn request_op(req: &Message) -> Result<(&str, &Value), HandlerError> {
    let op = req
        .str_field("op")
        .ok_or_else(|| HandlerError::bad_args("REQ without op"))?;
    static EMPTY: Value = Value::Null;
    Ok((op, req.payload.get("args").unwrap_or(&EMPTY)))
}

pub fn request(
    id: impl Into<String>,
    corr_id: impl Into<String>,
    ts: u64,
    op: &str,
    args: Value,
) -> Message {
    Message::new(MessageType::Req, id, ts)
        .with_corr(corr_id)
        .with("op", op)
        .with("args", args)
}

/// Runs `req` through `handler` at most once per corr_id; repeats get the
/// cached RSP or ERR.
pub async fn dispatch_request(
    session: &AdapterSession,
    req: &Message,
    handler: Arc<dyn Handler>,
    ts: u64,
) -> Message {
    let Some(corr_id) = req.corr_id.clone() else {
        return err_message(
            &session.response_id(),
            None,
            ts,
            "protocol_violation",
            "REQ without corr_id",
        );
    };
    if req.msg_type != MessageType::Req {
        return err_message(
            &session.response_id(),
            Some(&corr_id),
            ts,
            "protocol_violation",
            "expected REQ",
        );
    }
    let (cell, existed) = session
        .replay_cache
        .lock()
        .expect("replay cache lock")
        .slot(&corr_id);
    if existed {
        session.replays.fetch_add(1, Ordering::Relaxed);
    }
    cell.get_or_init(|| async {
        *session
            .executions
            .lock()
            .expect("executions lock")
            .entry(corr_id.clone())
            .or_default() += 1;
        let id = session.response_id();
        let outcome = match request_op(req) {
            Ok((op, args)) => {
                let (op, args) = (op.to_owned(), args.clone());
                let h = handler.clone();
                tokio::task::spawn_blocking(move || h.handle(&op, &args))
                    .await
                    .unwrap_or_else(|e| Err(HandlerError::new("handler_panicked", e.to_string())))
            }
            Err(e) => Err(e),
        };
        match outcome {
            Ok(result) => Message::new(MessageType::Rsp, id, ts)
                .with_corr(corr_id.clone())
                .with("result", result),
            Err(e) => err_message(&id, Some(&corr_id), ts, &e.code, &e.message),
        }
    })
    .await
    .clone()
}

/// Backoff before reconnect attempt `attempt` (0-based), in milliseconds.
pub fn reconnect_delay(attempt: u32) -> u64 {
    if attempt >= 4 {
        8000
    } else {
        (500u64 << attempt).min(8000)
    }
}

pub fn hello(id: &str, adapter_id: &str, token: &str, capabilities: &[String], ts: u64) -> Message {
    Message::new(MessageType::Hello, id, ts)
        .with("adapter_id", adapter_id)
        .with("token", token)
        .with("capabilities", json!(capabilities))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    struct Counting {
        calls: AtomicUsize,
    }

    impl Handler for Counting {
        fn capabilities(&self) -> Vec<String> {
            vec!["echo".into(), "boom".into()]
        }

        fn handle(&self, op: &str, args: &Value) -> Result<Value, HandlerError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            match op {
                "echo" => Ok(args.clone()),
                _ => Err(HandlerError::new("boom", "handler failed")),
            }
        }
    }

    fn hello_msg(token: &str) -> Message {
        hello("a-0", "sim-1", token, &["dock".into()], 1)
    }

    #[test]
    fn handshake_outcomes() {
        let ok = handshake(&hello_msg("s3cret"), "s3cret", "o-0", "sim-1-s0", 2);
        assert_eq!(ok.msg_type, MessageType::Welcome);
        assert_eq!(ok.str_field("session_id"), Some("sim-1-s0"));

        let bad = handshake(&hello_msg("nope"), "s3cret", "o-0", "sim-1-s0", 2);
        assert_eq!(bad.msg_type, MessageType::Err);
        assert_eq!(bad.str_field("code"), Some("auth_failed"));

        let mut hs = ServerHandshake::default();
        assert_eq!(
            hs.on_hello(&hello_msg("s3cret"), "s3cret", "o-0", "s0", 0)
                .msg_type,
            MessageType::Welcome
        );
        let again = hs.on_hello(&hello_msg("s3cret"), "s3cret", "o-1", "s1", 0);
        assert_eq!(again.str_field("code"), Some("protocol_violation"));

        let ping = Message::new(MessageType::Ping, "a-0", 0);
        assert_eq!(
            handshake(&ping, "x", "o", "s", 0).str_field("code"),
            Some("protocol_violation")
        );
    }

    #[tokio::test]
    async fn duplicate_requests_replay() {
        let handler = Arc::new(Counting {
            calls: AtomicUsize::new(0),
        });
        let session = AdapterSession::new("sim-1", "t");
        let req = request("o-1", "c-1", 0, "echo", json!({"x": 1}));
        let first = dispatch_request(&session, &req, handler.clone(), 5).await;
        assert_eq!(first.msg_type, MessageType::Rsp);
        assert_eq!(first.corr_id.as_deref(), Some("c-1"));
        assert_eq!(first.payload["result"], json!({"x": 1}));

        let mut retry = req.clone();
        retry.id = "o-9".into();
        let second = dispatch_request(&session, &retry, handler.clone(), 9).await;
        assert_eq!(second, first);
        assert_eq!(handler.calls.load(Ordering::SeqCst), 1);
        assert_eq!(session.replays(), 1);
        assert_eq!(session.executions()["c-1"], 1);
    }

    #[tokio::test]
    async fn concurrent_duplicates_execute_once() {
        let handler = Arc::new(Counting {
            calls: AtomicUsize::new(0),
        });
        let session = Arc::new(AdapterSession::new("sim-1", "t"));
        let req = request("o-1", "c-7", 0, "echo", json!("v"));
        let tasks: Vec<_> = (0..16)
            .map(|_| {
                let (s, r, h) = (
                    session.clone(),
                    req.clone(),
                    handler.clone() as Arc<dyn Handler>,
                );
                tokio::spawn(async move { dispatch_request(&s, &r, h, 0).await })
            })
            .collect();
        let mut replies = Vec::new();
        for t in tasks {
            replies.push(t.await.unwrap());
        }
        assert!(replies.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(handler.calls.load(Ordering::SeqCst), 1);
    }

    #[tokio::test]
    async fn handler_failure_becomes_err() {
        let handler = Arc::new(Counting {
            calls: AtomicUsize::new(0),
        });
        let session = AdapterSession::new("sim-1", "t");
        let reply = dispatch_request(
            &session,
            &request("o-1", "c-2", 0, "boom", json!({})),
            handler,
            0,
        )
        .await;
        assert_eq!(reply.msg_type, MessageType::Err);
        assert_eq!(reply.corr_id.as_deref(), Some("c-2"));
        assert_eq!(reply.str_field("code"), Some("boom"));
    }

    #[test]
    fn replay_cache_is_bounded() {
        let mut cache = ReplayCache::with_capacity(4);
        for i in 0..10 {
            cache.slot(&format!("c{i}"));
        }
        assert_eq!(cache.len(), 4);
        assert!(cache.entries.contains_key("c9") && !cache.entries.contains_key("c5"));
    }

    #[test]
    fn backoff_schedule() {
        assert_eq!(reconnect_delay(0), 500);
        assert_eq!(reconnect_delay(1), 1000);
        assert_eq!(reconnect_delay(2), 2000);
        assert_eq!(reconnect_delay(3), 4000);
        assert_eq!(reconnect_delay(4), 8000);
        assert_eq!(reconnect_delay(10), 8000);
        assert_eq!(reconnect_delay(62), 8000);
        assert_eq!(reconnect_delay(u32::MAX), 8000);
    }
}
