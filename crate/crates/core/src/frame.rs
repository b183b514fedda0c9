//! Length-prefixed frames exchanged between the runner and worker processes.
//!
//! ```text
//! +----------------+-------------------------------+
//! | len: u32 (BE)  | body: UTF-8 JSON, len bytes   |
//! +----------------+-------------------------------+
//! ```
//!
//! The body of a runner frame is `{"type": ..., "stream": ..., "payload": {...}}`
//! with `type` one of `config`, `message`, `emit`, `ack`, `error`, or one of
//! the key-value extension types `db_put`, `db_get`, `db_scan`, `db_delete`.
//! Bodies are written with sorted keys, so equal frames are byte-identical.

use std::fmt;
use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::value::{Document, Value};

/// Upper bound on a frame body.
pub const MAX_FRAME_LEN: u32 = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameType {
    Config,
    Message,
    Emit,
    Ack,
    Error,
    DbPut,
    DbGet,
    DbScan,
    DbDelete,
}

impl FrameType {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameType::Config => "config",
            FrameType::Message => "message",
            FrameType::Emit => "emit",
            FrameType::Ack => "ack",
            FrameType::Error => "error",
            FrameType::DbPut => "db_put",
            FrameType::DbGet => "db_get",
            FrameType::DbScan => "db_scan",
            FrameType::DbDelete => "db_delete",
        }
    }

    pub fn is_db_request(self) -> bool {
        matches!(
            self,
            FrameType::DbPut | FrameType::DbGet | FrameType::DbScan | FrameType::DbDelete
        )
    }
}

impl fmt::Display for FrameType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    #[serde(rename = "type")]
    pub kind: FrameType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<String>,
    #[serde(default)]
    pub payload: Document,
}

impl Frame {
    pub fn new(kind: FrameType, payload: Document) -> Self {
        Frame {
            kind,
            stream: None,
            payload,
        }
    }

    pub fn config(config: Document) -> Self {
        Frame::new(FrameType::Config, config)
    }

    pub fn message(stream: impl Into<String>, payload: Document) -> Self {
        Frame {
            kind: FrameType::Message,
            stream: Some(stream.into()),
            payload,
        }
    }

    pub fn emit(payload: Document) -> Self {
        Frame::new(FrameType::Emit, payload)
    }

    pub fn ack(payload: Document) -> Self {
        Frame::new(FrameType::Ack, payload)
    }

    pub fn error(reason: impl Into<String>) -> Self {
        let mut payload = Document::new();
        payload.insert("reason".into(), Value::String(reason.into()));
        Frame::new(FrameType::Error, payload)
    }

    /// The `reason` of an error frame.
    pub fn reason(&self) -> Option<&str> {
        self.payload.get("reason").and_then(Value::as_str)
    }

    pub fn to_body(&self) -> Vec<u8> {
        encode_body(self)
    }

    pub fn from_body(body: &[u8]) -> Result<Frame, FrameError> {
        decode_body(body)
    }

    /// The complete wire encoding: length prefix followed by the body.
    pub fn encode(&self) -> Vec<u8> {
        let body = self.to_body();
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("connection closed")]
    Closed,
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(u32),
    /// The body was consumed but could not be decoded; the stream is still
    /// positioned at the next frame.
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FrameError {
    /// Whether reading can continue after this error.
    pub fn is_recoverable(&self) -> bool {
        matches!(self, FrameError::Malformed(_))
    }
}

pub fn encode_body<T: Serialize>(value: &T) -> Vec<u8> {
    // Round-trip through Value so map keys come out sorted regardless of
    // struct field order.
    let value = serde_json::to_value(value).expect("frame bodies are serializable");
    serde_json::to_vec(&value).expect("values are serializable")
}

pub fn decode_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, FrameError> {
    let text = std::str::from_utf8(body).map_err(|e| FrameError::Malformed(format!("body is not UTF-8: {e}")))?;
    serde_json::from_str(text).map_err(|e| FrameError::Malformed(e.to_string()))
}

/// Writes one frame with the given body.
pub fn write_body<W: Write + ?Sized>(writer: &mut W, body: &[u8]) -> io::Result<()> {
    if body.len() > MAX_FRAME_LEN as usize {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame body too large"));
    }
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(body);
    writer.write_all(&buf)?;
    writer.flush()
}

/// Reads one frame body. A clean end of stream before the length prefix
/// yields [`FrameError::Closed`].
pub fn read_body<R: Read + ?Sized>(reader: &mut R) -> Result<Vec<u8>, FrameError> {
    let mut len_buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match reader.read(&mut len_buf[filled..]) {
            Ok(0) if filled == 0 => return Err(FrameError::Closed),
            Ok(0) => return Err(FrameError::Io(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len_buf);
    if len > MAX_FRAME_LEN {
        return Err(FrameError::TooLarge(len));
    }
    let mut body = vec![0u8; len as usize];
    reader.read_exact(&mut body)?;
    Ok(body)
}

pub fn write_frame<W: Write + ?Sized>(writer: &mut W, frame: &Frame) -> io::Result<()> {
    write_body(writer, &frame.to_body())
}

pub fn read_frame<R: Read + ?Sized>(reader: &mut R) -> Result<Frame, FrameError> {
    let body = read_body(reader)?;
    Frame::from_body(&body)
}
