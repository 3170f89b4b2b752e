//! Wire framing: a 4-byte big-endian length prefix followed by a canonical
//! UTF-8 JSON body `{type, id, corr_id?, ts, payload}`.

use std::fmt;
use std::str::FromStr;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::canonical::canonicalize;

pub const MAX_FRAME_LEN: usize = 1_048_576;
pub const PREFIX_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageType {
    Hello,
    Welcome,
    Ping,
    Pong,
    Req,
    Rsp,
    Evt,
    Err,
}

impl MessageType {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageType::Hello => "HELLO",
            MessageType::Welcome => "WELCOME",
            MessageType::Ping => "PING",
            MessageType::Pong => "PONG",
            MessageType::Req => "REQ",
            MessageType::Rsp => "RSP",
            MessageType::Evt => "EVT",
            MessageType::Err => "ERR",
        }
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageType {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "HELLO" => MessageType::Hello,
            "WELCOME" => MessageType::Welcome,
            "PING" => MessageType::Ping,
            "PONG" => MessageType::Pong,
            "REQ" => MessageType::Req,
            "RSP" => MessageType::Rsp,
            "EVT" => MessageType::Evt,
            "ERR" => MessageType::Err,
            _ => return Err(()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub msg_type: MessageType,
    pub id: String,
    pub corr_id: Option<String>,
    pub ts: u64,
    pub payload: Map<String, Value>,
}

impl Message {
    pub fn new(msg_type: MessageType, id: impl Into<String>, ts: u64) -> Self {
        Self {
            msg_type,
            id: id.into(),
            corr_id: None,
            ts,
            payload: Map::new(),
        }
    }

    pub fn with_corr(mut self, corr_id: impl Into<String>) -> Self {
        self.corr_id = Some(corr_id.into());
        self
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.payload.insert(key.to_owned(), value.into());
        self
    }

    pub fn str_field(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(Value::as_str)
    }

    fn to_value(&self) -> Value {
        let mut body = Map::new();
        body.insert("type".into(), Value::String(self.msg_type.as_str().into()));
        body.insert("id".into(), Value::String(self.id.clone()));
        if let Some(c) = &self.corr_id {
            body.insert("corr_id".into(), Value::String(c.clone()));
        }
        body.insert("ts".into(), Value::from(self.ts));
        body.insert("payload".into(), Value::Object(self.payload.clone()));
        Value::Object(body)
    }

    fn from_value(value: Value) -> Result<Self, String> {
        let Value::Object(mut body) = value else {
            return Err("body is not an object".into());
        };
        let text = |body: &mut Map<String, Value>, key: &str| match body.remove(key) {
            Some(Value::String(s)) => Ok(s),
            Some(_) => Err(format!("`{key}` is not a string")),
            None => Err(format!("missing `{key}`")),
        };
        let msg_type = text(&mut body, "type")?;
        let msg_type = msg_type
            .parse()
            .map_err(|_| format!("unknown type `{msg_type}`"))?;
        let id = text(&mut body, "id")?;
        let corr_id = match body.contains_key("corr_id") {
            true => Some(text(&mut body, "corr_id")?),
            false => None,
        };
        let ts = body
            .remove("ts")
            .and_then(|v| v.as_u64())
            .ok_or("missing or non-integer `ts`")?;
        let payload = match body.remove("payload") {
            Some(Value::Object(p)) => p,
            _ => return Err("missing or non-object `payload`".into()),
        };
        if let Some(extra) = body.keys().next() {
            return Err(format!("unknown field `{extra}`"));
        }
        Ok(Message {
            msg_type,
            id,
            corr_id,
            ts,
            payload,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte limit")]
    FrameTooLarge(usize),
    #[error("malformed frame body: {0}")]
    MalformedBody(String),
}

pub fn encode_body(msg: &Message) -> Result<Vec<u8>, FrameError> {
    canonicalize(&msg.to_value()).map_err(|e| FrameError::MalformedBody(e.to_string()))
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, FrameError> {
    frame_bytes(&encode_body(msg)?)
}

/// Prefixes an already encoded body with its length.
pub fn frame_bytes(body: &[u8]) -> Result<Vec<u8>, FrameError> {
    if body.len() > MAX_FRAME_LEN {
        return Err(FrameError::FrameTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(PREFIX_LEN + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    Ok(out)
}

pub fn decode_body(body: &[u8]) -> Result<Message, FrameError> {
    let text = std::str::from_utf8(body).map_err(|e| FrameError::MalformedBody(e.to_string()))?;
    let value: Value =
        serde_json::from_str(text).map_err(|e| FrameError::MalformedBody(e.to_string()))?;
    // Floats and nulls are not part of the wire format.
    canonicalize(&value).map_err(|e| FrameError::MalformedBody(e.to_string()))?;
    Message::from_value(value).map_err(FrameError::MalformedBody)
}

/// Decodes every complete frame at the front of `buffer` and returns the
/// undecoded tail.
pub fn decode_frames(buffer: &[u8]) -> Result<(Vec<Message>, &[u8]), FrameError> {
    let mut rest = buffer;
    let mut out = Vec::new();
    while rest.len() >= PREFIX_LEN {
        let len = u32::from_be_bytes(rest[..PREFIX_LEN].try_into().expect("4 bytes")) as usize;
        if len > MAX_FRAME_LEN {
            return Err(FrameError::FrameTooLarge(len));
        }
        if rest.len() < PREFIX_LEN + len {
            break;
        }
        out.push(decode_body(&rest[PREFIX_LEN..PREFIX_LEN + len])?);
        rest = &rest[PREFIX_LEN + len..];
    }
    Ok((out, rest))
}

/// Incremental decoder for a byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn push(&mut self, bytes: &[u8]) -> Result<Vec<Message>, FrameError> {
        self.buf.extend_from_slice(bytes);
        let (msgs, rest) = decode_frames(&self.buf)?;
        let consumed = self.buf.len() - rest.len();
        self.buf.drain(..consumed);
        Ok(msgs)
    }

    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}
