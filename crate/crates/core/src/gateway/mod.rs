//! Framed, multiplexed message protocol between the orchestrator and
//! on-premises adapters. The adapter always dials out; once connected,
//! either side may issue requests.

pub mod client;
pub mod frame;
pub mod link;
pub mod server;
pub mod session;

use std::time::{SystemTime, UNIX_EPOCH};

pub use client::{run_adapter, AdapterConfig, AdapterError, AdapterHandle};
pub use frame::{
    decode_frames, encode_frame, FrameDecoder, FrameError, Message, MessageType, MAX_FRAME_LEN,
};
pub use link::{Link, LinkError, Timings};
pub use server::{Gateway, GatewayConfig, GatewayError, DEFAULT_GATEWAY_PORT};
pub use session::{
    dispatch_request, handshake, reconnect_delay, AdapterSession, Handler, HandlerError,
};

/// Wall-clock milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
